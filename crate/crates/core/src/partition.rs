//! Partitioning a model's tensors into `m` components, each mixed with its
//! own factor.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor_store::{ParameterSet, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PartitionError {
    #[error("partition must have at least one component")]
    NoComponents,
    #[error("unassigned tensor {0}")]
    Unassigned(String),
    #[error("unknown tensor {0}")]
    UnknownTensor(String),
    #[error("empty component {0}")]
    EmptyComponent(usize),
    #[error("tensor {name} assigned to component {index}, outside 1..={m}")]
    IndexOutOfRange { name: String, index: usize, m: usize },
    #[error("{m} components requested but the {strategy} strategy yields only {available} groups")]
    TooManyComponents {
        m: usize,
        strategy: Strategy,
        available: usize,
    },
    #[error("label list has {labels} entries for {m} components")]
    LabelCount { labels: usize, m: usize },
    #[error("mixing vector has length {len}, expected {m}")]
    MixingLength { len: usize, m: usize },
    #[error("mixing factor {value} for component {component} outside [0, 1]")]
    MixingBounds { component: usize, value: f64 },
    #[error("unknown strategy {0:?} (expected contiguous-blocks or by-name-prefix)")]
    UnknownStrategy(String),
    #[error("bad --auto spec {0:?} (expected M:STRATEGY)")]
    BadAutoSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("partition file: {0}")]
    Io(#[from] std::io::Error),
    #[error("partition file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Assignment of every tensor to a component index in `1..=m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub m: usize,
    #[serde(rename = "label", default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    pub assignment: BTreeMap<String, usize>,
}

impl PartitionSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, PartitionError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serializes")
    }

    pub fn component_of(&self, name: &str) -> Option<usize> {
        self.assignment.get(name).copied()
    }

    /// Checks the spec against an ordered tensor schema.
    pub fn validate<S: AsRef<str>>(&self, schema: &[S]) -> Result<(), PartitionError> {
        if self.m == 0 {
            return Err(PartitionError::NoComponents);
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.m {
                return Err(PartitionError::LabelCount {
                    labels: labels.len(),
                    m: self.m,
                });
            }
        }
        for name in schema {
            if !self.assignment.contains_key(name.as_ref()) {
                return Err(PartitionError::Unassigned(name.as_ref().to_string()));
            }
        }
        for (name, &index) in &self.assignment {
            if !schema.iter().any(|s| s.as_ref() == name) {
                return Err(PartitionError::UnknownTensor(name.clone()));
            }
            if index == 0 || index > self.m {
                return Err(PartitionError::IndexOutOfRange {
                    name: name.clone(),
                    index,
                    m: self.m,
                });
            }
        }
        let mut used = vec![false; self.m];
        for &index in self.assignment.values() {
            used[index - 1] = true;
        }
        if let Some(j) = used.iter().position(|u| !u) {
            return Err(PartitionError::EmptyComponent(j + 1));
        }
        Ok(())
    }

    pub fn validate_for(&self, ps: &ParameterSet) -> Result<(), PartitionError> {
        self.validate(&ps.names())
    }
}

/// Deterministic rules for deriving a partition from tensor names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Split the ordered tensor list into `m` nearly equal runs; earlier runs
    /// take the remainder.
    ContiguousBlocks,
    /// Group tensors by their dotted parent path, then merge adjacent groups
    /// sharing the longest common prefix until `m` remain.
    ByNamePrefix,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::ContiguousBlocks => "contiguous-blocks",
            Strategy::ByNamePrefix => "by-name-prefix",
        })
    }
}

impl FromStr for Strategy {
    type Err = PartitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "contiguous-blocks" | "contiguous" => Ok(Strategy::ContiguousBlocks),
            "by-name-prefix" | "prefix" => Ok(Strategy::ByNamePrefix),
            other => Err(PartitionError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Parses the CLI form `M:STRATEGY`, e.g. `8:contiguous-blocks`.
pub fn parse_auto(spec: &str) -> Result<(usize, Strategy), PartitionError> {
    let (m, strategy) = spec
        .split_once(':')
        .ok_or_else(|| PartitionError::BadAutoSpec(spec.to_string()))?;
    let m = m
        .trim()
        .parse::<usize>()
        .map_err(|_| PartitionError::BadAutoSpec(spec.to_string()))?;
    Ok((m, strategy.trim().parse()?))
}

pub fn auto_partition<S: AsRef<str>>(
    schema: &[S],
    m: usize,
    strategy: Strategy,
) -> Result<PartitionSpec, PartitionError> {
    if m == 0 {
        return Err(PartitionError::NoComponents);
    }
    let groups: Vec<Vec<&str>> = match strategy {
        Strategy::ContiguousBlocks => {
            let n = schema.len();
            if m > n {
                return Err(PartitionError::TooManyComponents {
                    m,
                    strategy,
                    available: n,
                });
            }
            let (base, extra) = (n / m, n % m);
            let mut groups = Vec::with_capacity(m);
            let mut it = schema.iter().map(AsRef::as_ref);
            for j in 0..m {
                let size = base + usize::from(j < extra);
                groups.push(it.by_ref().take(size).collect());
            }
            groups
        }
        Strategy::ByNamePrefix => prefix_groups(schema, m)?,
    };
    let mut assignment = BTreeMap::new();
    let mut labels = Vec::with_capacity(m);
    for (j, group) in groups.iter().enumerate() {
        labels.push(group_label(group));
        for name in group {
            assignment.insert(name.to_string(), j + 1);
        }
    }
    Ok(PartitionSpec {
        m,
        labels: Some(labels),
        assignment,
    })
}

fn parent_path(name: &str) -> &str {
    match name.rfind('.') {
        Some(i) => &name[..i],
        None => name,
    }
}

fn common_segments(a: &str, b: &str) -> usize {
    a.split('.')
        .zip(b.split('.'))
        .take_while(|(x, y)| x == y)
        .count()
}

fn prefix_groups<S: AsRef<str>>(
    schema: &[S],
    m: usize,
) -> Result<Vec<Vec<&str>>, PartitionError> {
    // (group prefix, members) in first-appearance order
    let mut groups: Vec<(String, Vec<&str>)> = Vec::new();
    for name in schema.iter().map(AsRef::as_ref) {
        let parent = parent_path(name);
        match groups.iter_mut().find(|(p, _)| p == parent) {
            Some((_, members)) => members.push(name),
            None => groups.push((parent.to_string(), vec![name])),
        }
    }
    if m > groups.len() {
        return Err(PartitionError::TooManyComponents {
            m,
            strategy: Strategy::ByNamePrefix,
            available: groups.len(),
        });
    }
    while groups.len() > m {
        // merge the adjacent pair with the longest shared dotted prefix;
        // ties go to the smaller combined size, then the earlier pair
        let best = (0..groups.len() - 1)
            .min_by_key(|&i| {
                let shared = common_segments(&groups[i].0, &groups[i + 1].0);
                let size = groups[i].1.len() + groups[i + 1].1.len();
                (std::cmp::Reverse(shared), size, i)
            })
            .expect("at least two groups");
        let (next_prefix, next_members) = groups.remove(best + 1);
        let (prefix, members) = &mut groups[best];
        let shared = common_segments(prefix, &next_prefix);
        *prefix = prefix.split('.').take(shared).collect::<Vec<_>>().join(".");
        members.extend(next_members);
    }
    Ok(groups.into_iter().map(|(_, members)| members).collect())
}

fn group_label(group: &[&str]) -> String {
    match group {
        [only] => only.to_string(),
        [first, .., last] => format!("{first}..{last}"),
        [] => String::new(),
    }
}

/// Per-component mixing factors, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixingVector(Vec<f64>);

impl MixingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, PartitionError> {
        for (j, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(PartitionError::MixingBounds {
                    component: j + 1,
                    value: v,
                });
            }
        }
        Ok(Self(values))
    }

    pub fn uniform(m: usize, value: f64) -> Result<Self, PartitionError> {
        Self::new(vec![value; m])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Component-wise convex combination: every tensor `t` in component `j`
/// becomes `λ_j·psi[t] + (1 − λ_j)·theta[t]`.
pub fn mix_components(
    psi: &ParameterSet,
    theta: &ParameterSet,
    spec: &PartitionSpec,
    lambda: &MixingVector,
) -> Result<ParameterSet, PartitionError> {
    psi.check_same_schema(theta)?;
    if lambda.len() != spec.m {
        return Err(PartitionError::MixingLength {
            len: lambda.len(),
            m: spec.m,
        });
    }
    spec.validate_for(psi)?;
    let weights: Vec<f64> = psi
        .tensors()
        .iter()
        .map(|t| lambda.values()[spec.assignment[t.name()] - 1])
        .collect();
    let out = psi.map_with_schema(|ti, ei| {
        let l = weights[ti];
        let (p, t) = (psi.tensors()[ti].data()[ei], theta.tensors()[ti].data()[ei]);
        // exact endpoints, so signed zeros survive
        if l == 1.0 {
            f64::from(p)
        } else if l == 0.0 {
            f64::from(t)
        } else {
            l * f64::from(p) + (1.0 - l) * f64::from(t)
        }
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::lincomb;

    fn spec(m: usize, pairs: &[(&str, usize)]) -> PartitionSpec {
        PartitionSpec {
            m,
            labels: None,
            assignment: pairs.iter().map(|(n, j)| (n.to_string(), *j)).collect(),
        }
    }

    #[test]
    fn validate_examples() {
        let schema = ["a", "b"];
        spec(2, &[("a", 1), ("b", 2)]).validate(&schema).unwrap();
        let err = spec(2, &[("a", 1)]).validate(&schema).unwrap_err();
        assert_eq!(err.to_string(), "unassigned tensor b");
        let err = spec(2, &[("a", 1), ("b", 1)]).validate(&schema).unwrap_err();
        assert_eq!(err.to_string(), "empty component 2");
        let err = spec(2, &[("a", 1), ("b", 2), ("c", 2)])
            .validate(&schema)
            .unwrap_err();
        assert!(matches!(err, PartitionError::UnknownTensor(n) if n == "c"));
        let err = spec(2, &[("a", 1), ("b", 3)]).validate(&schema).unwrap_err();
        assert!(matches!(err, PartitionError::IndexOutOfRange { index: 3, .. }));
    }

    #[test]
    fn contiguous_blocks() {
        let schema = ["t0", "t1", "t2", "t3"];
        let p = auto_partition(&schema, 2, Strategy::ContiguousBlocks).unwrap();
        assert_eq!(p.assignment["t0"], 1);
        assert_eq!(p.assignment["t1"], 1);
        assert_eq!(p.assignment["t2"], 2);
        assert_eq!(p.assignment["t3"], 2);

        let p = auto_partition(&schema, 4, Strategy::ContiguousBlocks).unwrap();
        for (i, n) in schema.iter().enumerate() {
            assert_eq!(p.assignment[*n], i + 1);
        }

        // 5 tensors into 3 blocks: 2, 2, 1
        let schema = ["a", "b", "c", "d", "e"];
        let p = auto_partition(&schema, 3, Strategy::ContiguousBlocks).unwrap();
        let got: Vec<usize> = schema.iter().map(|n| p.assignment[*n]).collect();
        assert_eq!(got, vec![1, 1, 2, 2, 3]);

        assert!(matches!(
            auto_partition(&schema, 6, Strategy::ContiguousBlocks),
            Err(PartitionError::TooManyComponents { available: 5, .. })
        ));
    }

    #[test]
    fn by_name_prefix_on_six_tensors() {
        let schema = [
            "enc.0.weight",
            "enc.0.bias",
            "enc.1.weight",
            "enc.1.bias",
            "head.weight",
            "head.bias",
        ];
        // groups by parent: enc.0 | enc.1 | head; enc.0/enc.1 share "enc"
        let p = auto_partition(&schema, 2, Strategy::ByNamePrefix).unwrap();
        let got: Vec<usize> = schema.iter().map(|n| p.assignment[*n]).collect();
        assert_eq!(got, vec![1, 1, 1, 1, 2, 2]);

        let p = auto_partition(&schema, 3, Strategy::ByNamePrefix).unwrap();
        let got: Vec<usize> = schema.iter().map(|n| p.assignment[*n]).collect();
        assert_eq!(got, vec![1, 1, 2, 2, 3, 3]);

        let p = auto_partition(&schema, 1, Strategy::ByNamePrefix).unwrap();
        assert!(p.assignment.values().all(|&j| j == 1));

        assert!(matches!(
            auto_partition(&schema, 4, Strategy::ByNamePrefix),
            Err(PartitionError::TooManyComponents { available: 3, .. })
        ));
    }

    #[test]
    fn auto_partition_is_valid_and_deterministic() {
        let schema = ["x.a", "x.b", "y.a", "y.b", "z"];
        for strategy in [Strategy::ContiguousBlocks, Strategy::ByNamePrefix] {
            for m in 1..=3 {
                let a = auto_partition(&schema, m, strategy).unwrap();
                let b = auto_partition(&schema, m, strategy).unwrap();
                assert_eq!(a, b);
                a.validate(&schema).unwrap();
            }
        }
    }

    #[test]
    fn parse_auto_forms() {
        assert_eq!(parse_auto("8:contiguous-blocks").unwrap(), (8, Strategy::ContiguousBlocks));
        assert_eq!(parse_auto("3:by-name-prefix").unwrap(), (3, Strategy::ByNamePrefix));
        assert!(parse_auto("8").is_err());
        assert!(parse_auto("x:contiguous-blocks").is_err());
        assert!(matches!(parse_auto("2:random"), Err(PartitionError::UnknownStrategy(_))));
    }

    #[test]
    fn json_file_shape() {
        let text = r#"{"m": 2, "assignment": {"a": 1, "b": 2}}"#;
        let p: PartitionSpec = serde_json::from_str(text).unwrap();
        assert_eq!(p.m, 2);
        assert!(p.labels.is_none());
        let with_labels = r#"{"m": 1, "label": ["all"], "assignment": {"a": 1}}"#;
        let p: PartitionSpec = serde_json::from_str(with_labels).unwrap();
        assert_eq!(p.labels.as_deref(), Some(&["all".to_string()][..]));
    }

    fn two_models() -> (ParameterSet, ParameterSet) {
        let psi = ParameterSet::from_entries([("a", vec![1], vec![2.0]), ("b", vec![1], vec![2.0])])
            .unwrap();
        let theta =
            ParameterSet::from_entries([("a", vec![1], vec![0.0]), ("b", vec![1], vec![0.0])])
                .unwrap();
        (psi, theta)
    }

    #[test]
    fn mix_components_examples() {
        let (psi, theta) = two_models();
        let s = spec(2, &[("a", 1), ("b", 2)]);
        let ones = MixingVector::uniform(2, 1.0).unwrap();
        let zeros = MixingVector::uniform(2, 0.0).unwrap();
        assert_eq!(mix_components(&psi, &theta, &s, &ones).unwrap(), psi);
        assert_eq!(mix_components(&psi, &theta, &s, &zeros).unwrap(), theta);
        let sel = MixingVector::new(vec![1.0, 0.0]).unwrap();
        let out = mix_components(&psi, &theta, &s, &sel).unwrap();
        assert_eq!(out.get("a").unwrap().data(), &[2.0]);
        assert_eq!(out.get("b").unwrap().data(), &[0.0]);
    }

    #[test]
    fn mix_components_errors() {
        let (psi, theta) = two_models();
        let s = spec(2, &[("a", 1), ("b", 2)]);
        assert!(matches!(MixingVector::new(vec![1.2, 0.0]), Err(PartitionError::MixingBounds { .. })));
        assert!(matches!(MixingVector::new(vec![f64::NAN]), Err(PartitionError::MixingBounds { .. })));
        let short = MixingVector::uniform(1, 0.5).unwrap();
        assert!(matches!(
            mix_components(&psi, &theta, &s, &short),
            Err(PartitionError::MixingLength { len: 1, m: 2 })
        ));
        let bad = spec(2, &[("a", 1)]);
        let l = MixingVector::uniform(2, 0.5).unwrap();
        assert!(matches!(mix_components(&psi, &theta, &bad, &l), Err(PartitionError::Unassigned(_))));
    }

    #[test]
    fn uniform_lambda_matches_lincomb() {
        let psi = ParameterSet::from_entries([("a", vec![3], vec![0.3, -1.7, 5.0])]).unwrap();
        let theta = ParameterSet::from_entries([("a", vec![3], vec![1.1, 2.9, -0.25])]).unwrap();
        let s = spec(1, &[("a", 1)]);
        for v in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let mixed = mix_components(&psi, &theta, &s, &MixingVector::uniform(1, v).unwrap())
                .unwrap();
            let lc = lincomb(v, &psi, 1.0 - v, &theta).unwrap();
            assert_eq!(mixed, lc);
        }
    }
}
