//! Per-state persona sampling: largest-remainder quotas over the fitted joint
//! table, then seeded draws from the annotated pool with a relaxation ladder
//! for under-populated cells.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::TaggedUser;
use crate::corpus::Post;
use crate::distribution::JointTable;
use crate::seed::rng_for;
use crate::taxonomy::{joint_dims, Attribute, Tags};

/// Attributes dropped, cumulatively, when a cell runs out of users.
pub const RELAXATION_ORDER: [Attribute; 5] = [
    Attribute::Partisanship,
    Attribute::Ideology,
    Attribute::Age,
    Attribute::Race,
    Attribute::Gender,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub state: String,
    pub total_sample_size: usize,
    pub quotas: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    ExactCell,
    Relaxed {
        /// Tags of the user actually drawn.
        source_tags: Tags,
        dropped: Vec<Attribute>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoterProfile {
    pub user_id: String,
    pub state: String,
    /// Tags of the planned cell this persona fills.
    pub tags: Tags,
    pub post_history: Vec<Post>,
    pub provenance: Provenance,
}

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("state population must be positive")]
    ZeroPopulation,
    #[error("joint table for {0} has no mass")]
    DegenerateJoint(String),
    #[error("quota vector has {got} cells, expected {expected}")]
    PlanShape { got: usize, expected: usize },
    #[error("{state}: pool exhausted after full relaxation, short by {short} persona(s) in cells {cells:?}")]
    Exhausted { state: String, short: usize, cells: Vec<usize> },
    #[error("cannot read census file: {0}")]
    Census(String),
    #[error("no census population for state {0}")]
    MissingPopulation(String),
}

/// Apportions `total` across weights by largest remainder; ties go to the
/// lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        quotas[i] += 1;
    }
    quotas
}

/// Sample size is `round(population * fraction)`, at least one.
pub fn build_plan(joint: &JointTable, population: u64, fraction: f64, seed: u64) -> Result<SamplePlan, SampleError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SampleError::BadFraction(fraction));
    }
    if population == 0 {
        return Err(SampleError::ZeroPopulation);
    }
    let mass = joint.total();
    if mass.is_nan() || mass <= 0.0 {
        return Err(SampleError::DegenerateJoint(joint.state.clone()));
    }
    let total = ((population as f64 * fraction).round() as usize).max(1);
    Ok(SamplePlan {
        state: joint.state.clone(),
        total_sample_size: total,
        quotas: largest_remainder(&joint.cells, total),
        fraction,
        seed,
    })
}

/// Fully tagged pool users indexed by joint cell.
pub struct PoolIndex<'a> {
    users: Vec<(&'a TaggedUser, [usize; 5])>,
    by_cell: BTreeMap<usize, Vec<usize>>,
}

fn flat(cell: &[usize; 5]) -> usize {
    let dims = joint_dims();
    cell.iter().zip(&dims).fold(0, |acc, (c, d)| acc * d + c)
}

fn unflat(mut i: usize) -> [usize; 5] {
    let dims = joint_dims();
    let mut out = [0; 5];
    for axis in (0..5).rev() {
        out[axis] = i % dims[axis];
        i /= dims[axis];
    }
    out
}

impl<'a> PoolIndex<'a> {
    pub fn new(pool: &'a [TaggedUser]) -> Self {
        let users: Vec<_> = pool.iter().filter_map(|u| u.tags.cell().map(|c| (u, c))).collect();
        let mut by_cell: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (_, c)) in users.iter().enumerate() {
            by_cell.entry(flat(c)).or_default().push(i);
        }
        PoolIndex { users, by_cell }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn cell_size(&self, cell: usize) -> usize {
        self.by_cell.get(&cell).map_or(0, Vec::len)
    }
}

/// Draws the plan's quotas from the pool without replacement.
///
/// Exact-cell draws happen first for every cell; only then are shortfalls
/// filled by relaxing attributes in [`RELAXATION_ORDER`].
pub fn draw(plan: &SamplePlan, pool: &PoolIndex<'_>) -> Result<Vec<VoterProfile>, SampleError> {
    let n_cells: usize = joint_dims().iter().product();
    if plan.quotas.len() != n_cells {
        return Err(SampleError::PlanShape { got: plan.quotas.len(), expected: n_cells });
    }
    let mut rng = rng_for(plan.seed, &format!("sample:{}", plan.state));
    let mut used: HashSet<usize> = HashSet::new();
    let mut drawn: Vec<(usize, usize, Provenance)> = Vec::new();
    let mut shortfall: Vec<(usize, usize)> = Vec::new();

    for (cell, &q) in plan.quotas.iter().enumerate() {
        if q == 0 {
            continue;
        }
        let candidates = pool.by_cell.get(&cell).map(Vec::as_slice).unwrap_or(&[]);
        let take = q.min(candidates.len());
        for i in index::sample(&mut rng, candidates.len(), take) {
            used.insert(candidates[i]);
            drawn.push((cell, candidates[i], Provenance::ExactCell));
        }
        if take < q {
            shortfall.push((cell, q - take));
        }
    }

    let mut exhausted = Vec::new();
    let mut short_total = 0;
    for (cell, mut need) in shortfall {
        let target = unflat(cell);
        for level in 1..=RELAXATION_ORDER.len() {
            let dropped = &RELAXATION_ORDER[..level];
            let kept: Vec<usize> = Attribute::ALL
                .iter()
                .filter(|a| !dropped.contains(a))
                .map(|a| a.axis())
                .collect();
            let candidates: Vec<usize> = (0..pool.users.len())
                .filter(|i| !used.contains(i) && kept.iter().all(|&ax| pool.users[*i].1[ax] == target[ax]))
                .collect();
            let take = need.min(candidates.len());
            for i in index::sample(&mut rng, candidates.len(), take) {
                let u = candidates[i];
                used.insert(u);
                drawn.push((
                    cell,
                    u,
                    Provenance::Relaxed { source_tags: pool.users[u].0.tags, dropped: dropped.to_vec() },
                ));
            }
            need -= take;
            if need == 0 {
                break;
            }
        }
        if need > 0 {
            exhausted.push(cell);
            short_total += need;
        }
    }
    if !exhausted.is_empty() {
        return Err(SampleError::Exhausted { state: plan.state.clone(), short: short_total, cells: exhausted });
    }

    drawn.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| pool.users[a.1].0.user.user_id.cmp(&pool.users[b.1].0.user.user_id)));
    Ok(drawn
        .into_iter()
        .map(|(cell, u, provenance)| {
            let user = pool.users[u].0;
            VoterProfile {
                user_id: user.user.user_id.clone(),
                state: plan.state.clone(),
                tags: Tags::from_cell(unflat(cell)).expect("cell in range"),
                post_history: user.user.posts.clone(),
                provenance,
            }
        })
        .collect())
}

/// Uniform draw of `n` pool users, ignoring demographics.
pub fn draw_random(pool: &[TaggedUser], state: &str, n: usize, seed: u64) -> Vec<VoterProfile> {
    let mut rng = rng_for(seed, &format!("random:{state}"));
    let mut picked = index::sample(&mut rng, pool.len(), n.min(pool.len())).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| VoterProfile {
            user_id: pool[i].user.user_id.clone(),
            state: state.to_string(),
            tags: pool[i].tags,
            post_history: pool[i].user.posts.clone(),
            provenance: Provenance::ExactCell,
        })
        .collect()
}

#[derive(Deserialize)]
struct CensusRow {
    state: String,
    population: u64,
}

/// Reads `state,population` rows.
pub fn load_census(path: &Path) -> Result<BTreeMap<String, u64>, SampleError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| SampleError::Census(e.to_string()))?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<CensusRow>() {
        let row = row.map_err(|e| SampleError::Census(e.to_string()))?;
        out.insert(row.state, row.population);
    }
    Ok(out)
}

/// Plans and draws every state in parallel; per-state randomness derives from
/// (seed, state) so results do not depend on scheduling.
pub fn sample_states(
    joints: &BTreeMap<String, JointTable>,
    census: &BTreeMap<String, u64>,
    pool: &[TaggedUser],
    fraction: f64,
    seed: u64,
) -> Result<BTreeMap<String, Vec<VoterProfile>>, SampleError> {
    let index = PoolIndex::new(pool);
    joints
        .par_iter()
        .map(|(state, joint)| {
            let population = *census.get(state).ok_or_else(|| SampleError::MissingPopulation(state.clone()))?;
            let plan = build_plan(joint, population, fraction, seed)?;
            Ok((state.clone(), draw(&plan, &index)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::UserRecord;
    use crate::taxonomy::{AgeGroup, Gender, Ideology, Partisanship, Race};

    fn user(id: &str, tags: Tags) -> TaggedUser {
        TaggedUser { user: UserRecord::new(id, format!("@{id}"), Vec::new()), tags }
    }

    fn base_tags() -> Tags {
        Tags::complete(Gender::Male, AgeGroup::Youth, Race::White, Ideology::Liberal, Partisanship::Democrat)
    }

    #[test]
    fn plan_sizes() {
        let joint = JointTable::uniform("CA", joint_dims());
        let plan = build_plan(&joint, 10_000_000, 1e-4, 1).unwrap();
        assert_eq!(plan.total_sample_size, 1000);
        assert_eq!(plan.quotas.iter().sum::<usize>(), 1000);
        let national = build_plan(&joint, 331_449_281, 1e-3, 1).unwrap();
        assert_eq!(national.total_sample_size, 331_449);
        let tiny = build_plan(&joint, 10, 1e-4, 1).unwrap();
        assert_eq!(tiny.total_sample_size, 1);
    }

    #[test]
    fn plan_errors() {
        let joint = JointTable::uniform("CA", joint_dims());
        assert_eq!(build_plan(&joint, 10, 0.0, 1), Err(SampleError::BadFraction(0.0)));
        assert_eq!(build_plan(&joint, 10, 1.5, 1), Err(SampleError::BadFraction(1.5)));
        assert_eq!(build_plan(&joint, 0, 0.5, 1), Err(SampleError::ZeroPopulation));
        let zero = JointTable::new("CA", joint_dims(), vec![0.0; 288]);
        assert!(matches!(build_plan(&zero, 10, 0.5, 1), Err(SampleError::DegenerateJoint(_))));
    }

    #[test]
    fn largest_remainder_ties_by_index() {
        assert_eq!(largest_remainder(&[1.0; 4], 10), vec![3, 3, 2, 2]);
        assert_eq!(largest_remainder(&[0.5, 0.3, 0.2], 7), vec![4, 2, 1]);
        assert_eq!(largest_remainder(&[0.0, 0.0], 3), vec![0, 0]);
    }

    #[test]
    fn exact_draws_when_cells_are_full() {
        let t = base_tags();
        let pool: Vec<_> = (0..10).map(|i| user(&format!("u{i}"), t)).collect();
        let idx = PoolIndex::new(&pool);
        let mut quotas = vec![0; 288];
        quotas[0] = 4;
        let plan = SamplePlan { state: "CA".into(), total_sample_size: 4, quotas, fraction: 1.0, seed: 9 };
        let a = draw(&plan, &idx).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|v| v.provenance == Provenance::ExactCell));
        let b = draw(&plan, &idx).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<_> = a.iter().map(|v| &v.user_id).collect();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn empty_cell_relaxes_party_first() {
        // quota is for Republicans, only a Democrat with otherwise identical tags exists
        let dem = base_tags();
        let mut rep = dem;
        rep.partisanship = Some(Partisanship::Republican);
        let mut other = dem;
        other.gender = Some(Gender::Female);
        let pool = vec![user("d1", dem), user("d2", dem), user("f1", other)];
        let idx = PoolIndex::new(&pool);
        let mut quotas = vec![0; 288];
        quotas[flat(&rep.cell().unwrap())] = 2;
        let plan = SamplePlan { state: "TX".into(), total_sample_size: 2, quotas, fraction: 1.0, seed: 1 };
        let got = draw(&plan, &idx).unwrap();
        assert_eq!(got.len(), 2);
        for v in &got {
            assert!(v.user_id.starts_with('d'));
            assert_eq!(v.tags, rep);
            assert_eq!(
                v.provenance,
                Provenance::Relaxed { source_tags: dem, dropped: vec![Attribute::Partisanship] }
            );
        }
    }

    #[test]
    fn relaxation_does_not_steal_exact_users() {
        // cell 0 (index order first) is empty and would relax onto the only user of a later cell
        let dem = base_tags();
        let mut rep = dem;
        rep.partisanship = Some(Partisanship::Republican);
        let pool = vec![user("r1", rep), user("x1", { let mut t = dem; t.gender = Some(Gender::Female); t })];
        let idx = PoolIndex::new(&pool);
        let mut quotas = vec![0; 288];
        quotas[flat(&dem.cell().unwrap())] = 1;
        quotas[flat(&rep.cell().unwrap())] = 1;
        let plan = SamplePlan { state: "OH".into(), total_sample_size: 2, quotas, fraction: 1.0, seed: 5 };
        let got = draw(&plan, &idx).unwrap();
        let r1 = got.iter().find(|v| v.user_id == "r1").unwrap();
        assert_eq!(r1.provenance, Provenance::ExactCell);
    }

    #[test]
    fn exhausted_pool_reports_shortfall() {
        let pool = vec![user("a", base_tags())];
        let idx = PoolIndex::new(&pool);
        let mut quotas = vec![0; 288];
        quotas[5] = 3;
        let plan = SamplePlan { state: "WV".into(), total_sample_size: 3, quotas, fraction: 1.0, seed: 0 };
        assert_eq!(
            draw(&plan, &idx),
            Err(SampleError::Exhausted { state: "WV".into(), short: 2, cells: vec![5] })
        );
    }

    #[test]
    fn incomplete_tags_are_not_indexed() {
        let pool = vec![user("a", Tags { gender: Some(Gender::Male), ..Tags::default() })];
        assert!(PoolIndex::new(&pool).is_empty());
    }

    #[test]
    fn census_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("census.csv");
        std::fs::write(&p, "state,population\nCA, 39538223\nWY,576851\n").unwrap();
        let c = load_census(&p).unwrap();
        assert_eq!(c["CA"], 39_538_223);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn flat_matches_joint_table_layout() {
        let t = JointTable::uniform("S", joint_dims());
        for i in [0, 1, 17, 100, 287] {
            let c = unflat(i);
            assert_eq!(t.flat_index(&c), i);
            assert_eq!(flat(&c), i);
        }
    }
}
