//! Expression prior: grouped, conflict-aware sampling of plausible
//! coefficient vectors.
//!
//! Blendshapes are organised into *groups* (basic expressions such as a
//! left/right smile pair) and groups into *regions* (mouth, eye, ...). A
//! sample activates a random number of groups per region, up to the
//! region's cap. Paired groups flagged `symmetric` flip a coin between equal
//! left/right magnitudes and independent draws. Conflict rules are then
//! enforced by projection: `lower <= upper` orderings clamp `lower` down, and
//! exclusive sets keep only their largest member.
//!
//! The prior file format is JSON:
//!
//! ```json
//! {
//!   "symmetric_probability": 0.5,
//!   "regions": [
//!     { "name": "mouth", "max_active": 4, "groups": [
//!       { "name": "smile", "members": ["mouthSmileLeft", "mouthSmileRight"], "symmetric": true }
//!     ] }
//!   ],
//!   "rules": [
//!     { "le": { "lower": "mouthClose", "upper": "jawOpen" } },
//!     { "exclusive": ["jawLeft", "jawRight"] }
//!   ],
//!   "ranges": { "mouthSmileLeft": [0.2, 1.0] }
//! }
//! ```
//!
//! `ranges` is optional; a coefficient's range bounds the magnitudes it is
//! drawn from, and its upper end is enforced by validation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::names::NameRegistry;
use crate::rig::CoefficientVector;
use crate::seed;

pub const DEFAULT_PRIOR_JSON: &str = include_str!("../data/default_prior.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDef {
    pub name: String,
    pub members: Vec<String>,
    #[serde(default)]
    pub symmetric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDef {
    pub name: String,
    pub max_active: usize,
    pub groups: Vec<GroupDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleDef {
    Le { lower: String, upper: String },
    Exclusive(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDef {
    #[serde(default = "default_symmetric_probability")]
    pub symmetric_probability: f64,
    pub regions: Vec<RegionDef>,
    #[serde(default)]
    pub rules: Vec<RuleDef>,
    #[serde(default)]
    pub ranges: BTreeMap<String, [f64; 2]>,
}

fn default_symmetric_probability() -> f64 {
    0.5
}

#[derive(Debug, Clone)]
struct Group {
    members: Vec<usize>,
    symmetric: bool,
}

#[derive(Debug, Clone)]
struct RegionIdx {
    max_active: usize,
    groups: Vec<Group>,
}

#[derive(Debug, Clone, PartialEq)]
enum Rule {
    Le { lower: usize, upper: usize },
    Exclusive(Vec<usize>),
}

/// A validated prior, with names resolved against a registry.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    def: PriorDef,
    names: NameRegistry,
    regions: Vec<RegionIdx>,
    rules: Vec<Rule>,
    ranges: Vec<[f64; 2]>,
}

impl PriorSpec {
    pub fn new(def: PriorDef, names: NameRegistry) -> Result<Self> {
        let bad = |m: String| Error::InvalidPrior(m);
        if !(0.0..=1.0).contains(&def.symmetric_probability) {
            return Err(bad("symmetric_probability must lie in [0, 1]".into()));
        }
        let mut seen = vec![None::<String>; names.len()];
        let mut regions = Vec::with_capacity(def.regions.len());
        for r in &def.regions {
            let mut groups = Vec::with_capacity(r.groups.len());
            for g in &r.groups {
                if g.members.is_empty() {
                    return Err(bad(format!("group '{}' has no members", g.name)));
                }
                if g.symmetric && g.members.len() != 2 {
                    return Err(bad(format!(
                        "symmetric group '{}' must have exactly two members",
                        g.name
                    )));
                }
                let mut members = Vec::with_capacity(g.members.len());
                for m in &g.members {
                    let i = names.index_of(m)?;
                    if let Some(prev) = &seen[i] {
                        return Err(bad(format!(
                            "'{m}' appears in groups '{prev}' and '{}'",
                            g.name
                        )));
                    }
                    seen[i] = Some(g.name.clone());
                    members.push(i);
                }
                groups.push(Group {
                    members,
                    symmetric: g.symmetric,
                });
            }
            regions.push(RegionIdx {
                max_active: r.max_active,
                groups,
            });
        }
        if let Some(i) = seen.iter().position(|s| s.is_none()) {
            return Err(bad(format!(
                "'{}' is not assigned to any group",
                names.name(i)
            )));
        }
        let mut region_names: Vec<&str> = def.regions.iter().map(|r| r.name.as_str()).collect();
        region_names.sort_unstable();
        if region_names.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("duplicate region name".into()));
        }

        let rules = def
            .rules
            .iter()
            .map(|r| match r {
                RuleDef::Le { lower, upper } => Ok(Rule::Le {
                    lower: names.index_of(lower)?,
                    upper: names.index_of(upper)?,
                }),
                RuleDef::Exclusive(m) => {
                    if m.len() < 2 {
                        return Err(bad("exclusive set needs at least two members".into()));
                    }
                    Ok(Rule::Exclusive(
                        m.iter().map(|n| names.index_of(n)).collect::<Result<_>>()?,
                    ))
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let mut ranges = vec![[0.0, 1.0]; names.len()];
        for (n, &[lo, hi]) in &def.ranges {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(bad(format!(
                    "range for '{n}' must satisfy 0 <= lo <= hi <= 1"
                )));
            }
            ranges[names.index_of(n)?] = [lo, hi];
        }

        Ok(Self {
            def,
            names,
            regions,
            rules,
            ranges,
        })
    }

    pub fn from_json(text: &str, names: NameRegistry) -> Result<Self> {
        let def: PriorDef =
            serde_json::from_str(text).map_err(|e| Error::InvalidPrior(e.to_string()))?;
        Self::new(def, names)
    }

    pub fn load(path: &Path, names: NameRegistry) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, names)
    }

    /// The shipped prior over the ARKit name set.
    pub fn default_arkit() -> Self {
        Self::from_json(DEFAULT_PRIOR_JSON, NameRegistry::arkit()).expect("shipped prior is valid")
    }

    pub fn definition(&self) -> &PriorDef {
        &self.def
    }

    pub fn names(&self) -> &NameRegistry {
        &self.names
    }

    /// SHA-256 of the canonical JSON encoding, recorded in dataset headers.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.def).expect("prior serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn region_name(&self, r: usize) -> &str {
        &self.def.regions[r].name
    }

    fn draw(&self, i: usize, rng: &mut impl Rng) -> f64 {
        let [lo, hi] = self.ranges[i];
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    }

    /// Draws one expression. Consumes the RNG deterministically.
    pub fn sample(&self, rng: &mut impl Rng) -> CoefficientVector {
        let mut w = vec![0.0; self.names.len()];
        for region in &self.regions {
            let cap = region.max_active.min(region.groups.len());
            let k = rng.random_range(0..=cap);
            let mut picked = index::sample(rng, region.groups.len(), k).into_vec();
            picked.sort_unstable();
            for gi in picked {
                let g = &region.groups[gi];
                if g.symmetric && rng.random_bool(self.def.symmetric_probability) {
                    let v = self
                        .draw(g.members[0], rng)
                        .min(self.ranges[g.members[1]][1]);
                    w[g.members[0]] = v;
                    w[g.members[1]] = v;
                } else {
                    for &m in &g.members {
                        w[m] = self.draw(m, rng);
                    }
                }
            }
        }
        self.project(&mut w);
        CoefficientVector::new(w).expect("registry has 52 names")
    }

    /// Samples with the crate's seeded RNG.
    pub fn sample_seeded(&self, seed: u64) -> CoefficientVector {
        self.sample(&mut seed::rng(seed, seed::stream::SAMPLE, 0))
    }

    /// Enforces conflict rules in place. Every step only lowers values, so
    /// repeating the pass reaches a fixed point.
    fn project(&self, w: &mut [f64]) {
        for _ in 0..64 {
            let mut changed = false;
            for rule in &self.rules {
                match rule {
                    Rule::Le { lower, upper } => {
                        if w[*lower] > w[*upper] {
                            w[*lower] = w[*upper];
                            changed = true;
                        }
                    }
                    Rule::Exclusive(members) => {
                        let keep = members.iter().copied().fold(members[0], |best, m| {
                            if w[m] > w[best] {
                                m
                            } else {
                                best
                            }
                        });
                        for &m in members {
                            if m != keep && w[m] != 0.0 {
                                w[m] = 0.0;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
    }

    /// Every constraint `w` breaks; empty means the vector is admissible.
    pub fn validate(&self, w: &[f64]) -> Vec<Violation> {
        let mut out = Vec::new();
        if w.len() != self.names.len() {
            out.push(Violation::Count {
                expected: self.names.len(),
                got: w.len(),
            });
            return out;
        }
        for (i, &v) in w.iter().enumerate() {
            let hi = self.ranges[i][1];
            if !(0.0..=hi).contains(&v) {
                out.push(Violation::Range {
                    name: self.names.name(i).to_string(),
                    value: v,
                    max: hi,
                });
            }
        }
        for (ri, region) in self.regions.iter().enumerate() {
            let active = region
                .groups
                .iter()
                .filter(|g| g.members.iter().any(|&m| w[m] != 0.0))
                .count();
            if active > region.max_active {
                out.push(Violation::RegionCardinality {
                    region: self.region_name(ri).to_string(),
                    active,
                    max: region.max_active,
                });
            }
        }
        for rule in &self.rules {
            match rule {
                Rule::Le { lower, upper } => {
                    if w[*lower] > w[*upper] {
                        out.push(Violation::Ordering {
                            lower: self.names.name(*lower).to_string(),
                            upper: self.names.name(*upper).to_string(),
                            lower_value: w[*lower],
                            upper_value: w[*upper],
                        });
                    }
                }
                Rule::Exclusive(members) => {
                    let active: Vec<String> = members
                        .iter()
                        .filter(|&&m| w[m] != 0.0)
                        .map(|&m| self.names.name(m).to_string())
                        .collect();
                    if active.len() > 1 {
                        out.push(Violation::Exclusive { active });
                    }
                }
            }
        }
        out
    }

    /// Number of active groups per region, in spec order.
    pub fn active_groups(&self, w: &[f64]) -> Vec<(String, usize)> {
        self.regions
            .iter()
            .enumerate()
            .map(|(ri, r)| {
                let n = r
                    .groups
                    .iter()
                    .filter(|g| g.members.iter().any(|&m| w[m] != 0.0))
                    .count();
                (self.region_name(ri).to_string(), n)
            })
            .collect()
    }

    /// Region name and member names of every symmetric pair.
    pub fn symmetric_pairs(&self) -> Vec<(usize, usize)> {
        self.regions
            .iter()
            .flat_map(|r| r.groups.iter())
            .filter(|g| g.symmetric)
            .map(|g| (g.members[0], g.members[1]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Count {
        expected: usize,
        got: usize,
    },
    Range {
        name: String,
        value: f64,
        max: f64,
    },
    RegionCardinality {
        region: String,
        active: usize,
        max: usize,
    },
    Ordering {
        lower: String,
        upper: String,
        lower_value: f64,
        upper_value: f64,
    },
    Exclusive {
        active: Vec<String>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Count { expected, got } => {
                write!(f, "expected {expected} coefficients, got {got}")
            }
            Violation::Range { name, value, max } => {
                write!(f, "{name} = {value} outside [0, {max}]")
            }
            Violation::RegionCardinality {
                region,
                active,
                max,
            } => {
                write!(f, "region {region} has {active} active groups (max {max})")
            }
            Violation::Ordering {
                lower,
                upper,
                lower_value,
                upper_value,
            } => write!(f, "{lower} = {lower_value} exceeds {upper} = {upper_value}"),
            Violation::Exclusive { active } => write!(
                f,
                "mutually exclusive shapes active together: {}",
                active.join(", ")
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(spec: &PriorSpec, n: &str) -> usize {
        spec.names().index_of(n).unwrap()
    }

    #[test]
    fn zeros_are_admissible() {
        let spec = PriorSpec::default_arkit();
        assert!(spec.validate(&[0.0; 52]).is_empty());
    }

    #[test]
    fn ordering_violation_names_both_shapes() {
        let spec = PriorSpec::default_arkit();
        let mut w = vec![0.0; 52];
        w[idx(&spec, "mouthClose")] = 0.9;
        w[idx(&spec, "jawOpen")] = 0.2;
        let v = spec.validate(&w);
        assert_eq!(v.len(), 1);
        match &v[0] {
            Violation::Ordering { lower, upper, .. } => {
                assert_eq!(lower, "mouthClose");
                assert_eq!(upper, "jawOpen");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn other_violation_kinds() {
        let spec = PriorSpec::default_arkit();
        let mut w = vec![0.0; 52];
        w[idx(&spec, "jawLeft")] = 0.3;
        w[idx(&spec, "jawRight")] = 0.4;
        w[idx(&spec, "cheekPuff")] = 1.5;
        let v = spec.validate(&w);
        assert!(v.iter().any(|x| matches!(x, Violation::Exclusive { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::Range { .. })));
        let mut w = vec![0.0; 52];
        for n in [
            "mouthFunnel",
            "mouthPucker",
            "mouthSmileLeft",
            "mouthFrownLeft",
            "mouthDimpleLeft",
        ] {
            w[idx(&spec, n)] = 0.5;
        }
        let v = spec.validate(&w);
        assert!(matches!(
            &v[..],
            [Violation::RegionCardinality {
                active: 5,
                max: 4,
                ..
            }]
        ));
        assert_eq!(spec.validate(&[0.0; 3]).len(), 1);
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = PriorSpec::default_arkit();
        assert_eq!(spec.sample_seeded(11), spec.sample_seeded(11));
        assert_ne!(spec.sample_seeded(11), spec.sample_seeded(12));
    }

    #[test]
    fn forced_symmetric_branch_gives_equal_sides() {
        let names = NameRegistry::arkit();
        let all: Vec<String> = names
            .names()
            .iter()
            .filter(|n| *n != "mouthSmileLeft" && *n != "mouthSmileRight")
            .cloned()
            .collect();
        let def = PriorDef {
            symmetric_probability: 1.0,
            regions: vec![
                RegionDef {
                    name: "mouth".into(),
                    max_active: 1,
                    groups: vec![GroupDef {
                        name: "smile".into(),
                        members: vec!["mouthSmileLeft".into(), "mouthSmileRight".into()],
                        symmetric: true,
                    }],
                },
                RegionDef {
                    name: "rest".into(),
                    max_active: 0,
                    groups: vec![GroupDef {
                        name: "rest".into(),
                        members: all,
                        symmetric: false,
                    }],
                },
            ],
            rules: vec![],
            ranges: BTreeMap::new(),
        };
        let spec = PriorSpec::new(def, names).unwrap();
        let (l, r) = (idx(&spec, "mouthSmileLeft"), idx(&spec, "mouthSmileRight"));
        let mut activated = 0;
        for s in 0..500 {
            let w = spec.sample_seeded(s);
            assert_eq!(w[l], w[r]);
            if w[l] > 0.0 {
                activated += 1;
            }
        }
        assert!(activated > 100);
    }

    #[test]
    fn rejects_malformed_specs() {
        let names = NameRegistry::arkit();
        let mut def: PriorDef = serde_json::from_str(DEFAULT_PRIOR_JSON).unwrap();
        def.rules.push(RuleDef::Le {
            lower: "mouthOpen".into(),
            upper: "jawOpen".into(),
        });
        assert!(PriorSpec::new(def, names.clone()).is_err());

        let mut def: PriorDef = serde_json::from_str(DEFAULT_PRIOR_JSON).unwrap();
        def.regions[0].groups.remove(0);
        assert!(matches!(
            PriorSpec::new(def, names.clone()),
            Err(Error::InvalidPrior(_))
        ));

        let mut def: PriorDef = serde_json::from_str(DEFAULT_PRIOR_JSON).unwrap();
        let dup = def.regions[0].groups[0].clone();
        def.regions[1].groups.push(dup);
        assert!(PriorSpec::new(def, names).is_err());
    }

    #[test]
    fn independent_branch_can_differ() {
        let spec = PriorSpec::default_arkit();
        let (l, r) = (idx(&spec, "mouthSmileLeft"), idx(&spec, "mouthSmileRight"));
        let differ = (0..2000)
            .map(|s| spec.sample_seeded(s))
            .any(|w| w[l] > 0.0 && w[r] > 0.0 && w[l] != w[r]);
        assert!(differ);
    }
}
