//! Demographic label taxonomy shared by annotation, fitting and sampling.
//!
//! Five attributes, each with a closed category set. The attribute order
//! below is also the IPF sweep order and the axis order of every joint table.

use serde::{Deserialize, Serialize};
use std::fmt;

/// A closed, ordered category set for one attribute.
pub trait Category: Copy + Eq + Sized + 'static {
    const ALL: &'static [Self];
    const ATTRIBUTE: Attribute;

    fn label(self) -> &'static str;

    fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).expect("category in ALL")
    }

    fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Case-insensitive label lookup. Accepts a few common aliases.
    fn parse(s: &str) -> Option<Self> {
        let norm = normalize(s);
        Self::ALL.iter().copied().find(|c| normalize(c.label()) == norm).or_else(|| {
            Self::ALL
                .iter()
                .copied()
                .find(|c| aliases(Self::ATTRIBUTE, *c).iter().any(|a| *a == norm))
        })
    }
}

fn normalize(s: &str) -> String {
    s.trim().to_ascii_lowercase().replace(['_', ' '], "-")
}

fn aliases<C: Category>(attr: Attribute, c: C) -> &'static [&'static str] {
    match (attr, c.index()) {
        (Attribute::Age, 1) => &["middle", "middleaged", "middle-age"],
        (Attribute::Age, 2) => &["senior", "old"],
        (Attribute::Partisanship, 0) => &["democratic", "democratic-party", "dem"],
        (Attribute::Partisanship, 1) => &["republican-party", "rep", "gop"],
        (Attribute::Partisanship, 3) => &["other", "other-party"],
        _ => &[],
    }
}

macro_rules! category_enum {
    ($name:ident, $attr:expr, { $($variant:ident => $label:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl Category for $name {
            const ALL: &'static [Self] = &[$($name::$variant),+];
            const ATTRIBUTE: Attribute = $attr;

            fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.label())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(d)?;
                <$name as Category>::parse(&raw).ok_or_else(|| {
                    serde::de::Error::custom(format!(
                        "unknown {} label {:?}",
                        $attr.name(),
                        raw
                    ))
                })
            }
        }
    };
}

category_enum!(Gender, Attribute::Gender, { Male => "Male", Female => "Female" });
category_enum!(AgeGroup, Attribute::Age, {
    Youth => "Youth",
    MiddleAged => "Middle-aged",
    Elderly => "Elderly",
});
category_enum!(Race, Attribute::Race, {
    White => "White",
    Black => "Black",
    Asian => "Asian",
    Hispanic => "Hispanic",
});
category_enum!(Ideology, Attribute::Ideology, {
    Liberal => "Liberal",
    Moderate => "Moderate",
    Conservative => "Conservative",
});
category_enum!(Partisanship, Attribute::Partisanship, {
    Democrat => "Democrat",
    Republican => "Republican",
    Independent => "Independent",
    Others => "Others",
});

/// The five tagged attributes, in canonical (sweep) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Gender,
    Age,
    Race,
    Ideology,
    Partisanship,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Gender,
        Attribute::Age,
        Attribute::Race,
        Attribute::Ideology,
        Attribute::Partisanship,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Age => "age",
            Attribute::Race => "race",
            Attribute::Ideology => "ideology",
            Attribute::Partisanship => "partisanship",
        }
    }

    pub fn parse(s: &str) -> Option<Attribute> {
        match normalize(s).as_str() {
            "gender" | "sex" => Some(Attribute::Gender),
            "age" | "age-group" => Some(Attribute::Age),
            "race" | "ethnicity" => Some(Attribute::Race),
            "ideology" => Some(Attribute::Ideology),
            "partisanship" | "party" => Some(Attribute::Partisanship),
            _ => None,
        }
    }

    pub fn axis(self) -> usize {
        self as usize
    }

    pub fn cardinality(self) -> usize {
        self.labels().len()
    }

    pub fn labels(self) -> Vec<&'static str> {
        fn labels<C: Category>() -> Vec<&'static str> {
            C::ALL.iter().map(|c| c.label()).collect()
        }
        match self {
            Attribute::Gender => labels::<Gender>(),
            Attribute::Age => labels::<AgeGroup>(),
            Attribute::Race => labels::<Race>(),
            Attribute::Ideology => labels::<Ideology>(),
            Attribute::Partisanship => labels::<Partisanship>(),
        }
    }

    /// Index of a category label for this attribute (case-insensitive).
    pub fn category_index(self, label: &str) -> Option<usize> {
        match self {
            Attribute::Gender => Gender::parse(label).map(Category::index),
            Attribute::Age => AgeGroup::parse(label).map(Category::index),
            Attribute::Race => Race::parse(label).map(Category::index),
            Attribute::Ideology => Ideology::parse(label).map(Category::index),
            Attribute::Partisanship => Partisanship::parse(label).map(Category::index),
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis sizes of the joint table, in [`Attribute::ALL`] order.
pub fn joint_dims() -> Vec<usize> {
    Attribute::ALL.iter().map(|a| a.cardinality()).collect()
}

/// Per-user demographic tags. Any attribute may be unknown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tags {
    pub gender: Option<Gender>,
    pub age: Option<AgeGroup>,
    pub race: Option<Race>,
    pub ideology: Option<Ideology>,
    pub partisanship: Option<Partisanship>,
}

impl Tags {
    pub fn complete(
        gender: Gender,
        age: AgeGroup,
        race: Race,
        ideology: Ideology,
        partisanship: Partisanship,
    ) -> Self {
        Tags {
            gender: Some(gender),
            age: Some(age),
            race: Some(race),
            ideology: Some(ideology),
            partisanship: Some(partisanship),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.cell().is_some()
    }

    /// Category index per attribute, `None` where unknown.
    pub fn indices(&self) -> [Option<usize>; 5] {
        [
            self.gender.map(Category::index),
            self.age.map(Category::index),
            self.race.map(Category::index),
            self.ideology.map(Category::index),
            self.partisanship.map(Category::index),
        ]
    }

    /// Joint-table coordinates; only defined for complete tags.
    pub fn cell(&self) -> Option<[usize; 5]> {
        let idx = self.indices();
        let mut out = [0; 5];
        for (o, i) in out.iter_mut().zip(idx) {
            *o = i?;
        }
        Some(out)
    }

    pub fn from_cell(cell: [usize; 5]) -> Option<Self> {
        Some(Tags {
            gender: Gender::from_index(cell[0]),
            age: AgeGroup::from_index(cell[1]),
            race: Race::from_index(cell[2]),
            ideology: Ideology::from_index(cell[3]),
            partisanship: Partisanship::from_index(cell[4]),
        })
        .filter(Tags::is_complete)
    }

    pub fn label(&self, attr: Attribute) -> Option<&'static str> {
        match attr {
            Attribute::Gender => self.gender.map(Category::label),
            Attribute::Age => self.age.map(Category::label),
            Attribute::Race => self.race.map(Category::label),
            Attribute::Ideology => self.ideology.map(Category::label),
            Attribute::Partisanship => self.partisanship.map(Category::label),
        }
    }

    /// Sets an attribute from a label; returns false if the label is not in the taxonomy.
    pub fn set_label(&mut self, attr: Attribute, label: &str) -> bool {
        match attr {
            Attribute::Gender => Gender::parse(label).map(|v| self.gender = Some(v)),
            Attribute::Age => AgeGroup::parse(label).map(|v| self.age = Some(v)),
            Attribute::Race => Race::parse(label).map(|v| self.race = Some(v)),
            Attribute::Ideology => Ideology::parse(label).map(|v| self.ideology = Some(v)),
            Attribute::Partisanship => {
                Partisanship::parse(label).map(|v| self.partisanship = Some(v))
            }
        }
        .is_some()
    }

    pub fn clear(&mut self, attr: Attribute) {
        match attr {
            Attribute::Gender => self.gender = None,
            Attribute::Age => self.age = None,
            Attribute::Race => self.race = None,
            Attribute::Ideology => self.ideology = None,
            Attribute::Partisanship => self.partisanship = None,
        }
    }
}

/// Maps a census age band to the three-group taxonomy.
///
/// `18-24` and `25-34` are Youth, `35-44` and `45-64` Middle-aged, `65+` Elderly.
/// Taxonomy labels themselves pass through unchanged.
pub fn age_band_to_group(band: &str) -> Option<AgeGroup> {
    let b: String = band
        .trim()
        .to_ascii_lowercase()
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect();
    let b = b.trim_end_matches("yearsold").trim_end_matches("years");
    match b {
        "18-24" | "25-34" => Some(AgeGroup::Youth),
        "35-44" | "45-64" => Some(AgeGroup::MiddleAged),
        "65+" | "over65" | "65andover" | "65-plus" => Some(AgeGroup::Elderly),
        _ => AgeGroup::parse(band),
    }
}
