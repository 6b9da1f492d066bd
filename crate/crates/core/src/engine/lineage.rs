//! Lineage DAG. Every dataset is one node; nodes are immutable once created
//! except that a checkpoint may turn a derived node into a source.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub type DatasetId = u64;
pub type BroadcastId = u64;

/// A kernel application recorded in the lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSpec {
    pub kernel: String,
    pub params: Vec<f64>,
    pub broadcasts: Vec<BroadcastId>,
}

impl MapSpec {
    pub fn new(kernel: impl Into<String>) -> Self {
        MapSpec {
            kernel: kernel.into(),
            params: Vec::new(),
            broadcasts: Vec::new(),
        }
    }

    pub fn params(mut self, params: &[f64]) -> Self {
        self.params = params.to_vec();
        self
    }

    pub fn broadcasts(mut self, ids: &[BroadcastId]) -> Self {
        self.broadcasts = ids.to_vec();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Source,
    Map { parent: DatasetId, spec: MapSpec },
    Zip { parents: Vec<DatasetId> },
    Unbundle { parent: DatasetId, slot: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub num_partitions: usize,
    /// Records per partition, when known without running kernels.
    pub counts: Option<Vec<usize>>,
}

impl Node {
    pub fn parents(&self) -> Vec<DatasetId> {
        match &self.kind {
            NodeKind::Source => Vec::new(),
            NodeKind::Map { parent, .. } | NodeKind::Unbundle { parent, .. } => vec![*parent],
            NodeKind::Zip { parents } => parents.clone(),
        }
    }

    /// Zip and unbundle nodes are views over their parents and never cached.
    pub fn is_view(&self) -> bool {
        matches!(self.kind, NodeKind::Zip { .. } | NodeKind::Unbundle { .. })
    }
}

/// The subset of the DAG needed to (re)compute one dataset. Travels with tasks.
pub type LineageSlice = BTreeMap<DatasetId, Node>;

#[derive(Debug, Default)]
pub struct Lineage {
    nodes: BTreeMap<DatasetId, Node>,
    next_id: DatasetId,
}

impl Lineage {
    pub fn insert(&mut self, node: Node) -> Result<DatasetId> {
        for p in node.parents() {
            if !self.nodes.contains_key(&p) {
                return Err(Error::Lineage(format!("parent dataset {p} does not exist")));
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.insert(id, node);
        Ok(id)
    }

    pub fn get(&self, id: DatasetId) -> Result<&Node> {
        self.nodes
            .get(&id)
            .ok_or_else(|| Error::Lineage(format!("dataset {id} is not in the lineage")))
    }

    pub fn contains(&self, id: DatasetId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Re-root `id` as a source with known partition counts.
    pub fn make_source(&mut self, id: DatasetId, counts: Vec<usize>) -> Result<()> {
        let node = self
            .nodes
            .get_mut(&id)
            .ok_or_else(|| Error::Lineage(format!("dataset {id} is not in the lineage")))?;
        node.kind = NodeKind::Source;
        node.counts = Some(counts);
        Ok(())
    }

    /// Every ancestor of `id` including itself.
    pub fn ancestors(&self, id: DatasetId) -> Result<BTreeSet<DatasetId>> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(d) = stack.pop() {
            if seen.insert(d) {
                stack.extend(self.get(d)?.parents());
            }
        }
        Ok(seen)
    }

    pub fn slice(&self, id: DatasetId) -> Result<LineageSlice> {
        self.ancestors(id)?
            .into_iter()
            .map(|d| Ok((d, self.get(d)?.clone())))
            .collect()
    }

    /// Number of edges walked from `id` to its deepest source.
    pub fn depth(&self, id: DatasetId) -> Result<usize> {
        let node = self.get(id)?;
        let mut best = 0;
        for p in node.parents() {
            best = best.max(1 + self.depth(p)?);
        }
        Ok(best)
    }

    /// Remove nodes that are neither in `keep` nor ancestors of it; returns the
    /// removed ids.
    pub fn retain_ancestors_of(&mut self, keep: &[DatasetId]) -> Result<Vec<DatasetId>> {
        let mut live = BTreeSet::new();
        for &k in keep {
            live.extend(self.ancestors(k)?);
        }
        let dead: Vec<DatasetId> = self
            .nodes
            .keys()
            .copied()
            .filter(|d| !live.contains(d))
            .collect();
        for d in &dead {
            self.nodes.remove(d);
        }
        Ok(dead)
    }

    pub fn ids(&self) -> impl Iterator<Item = DatasetId> + '_ {
        self.nodes.keys().copied()
    }
}

/// Partition sizes for `records` over `parts`: the first `records % parts`
/// partitions get one extra record.
pub fn partition_sizes(records: usize, parts: usize) -> Result<Vec<usize>> {
    if parts == 0 {
        return Err(Error::Config("number of partitions must be at least 1".into()));
    }
    if parts > records {
        return Err(Error::Config(format!(
            "{parts} partitions requested for {records} records"
        )));
    }
    let base = records / parts;
    let extra = records % parts;
    Ok((0..parts).map(|p| base + usize::from(p < extra)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(n: usize) -> Node {
        Node {
            kind: NodeKind::Source,
            num_partitions: n,
            counts: Some(vec![1; n]),
        }
    }

    #[test]
    fn sizes_follow_the_rule() {
        assert_eq!(partition_sizes(10, 4).unwrap(), vec![3, 3, 2, 2]);
        assert_eq!(partition_sizes(8, 8).unwrap(), vec![1; 8]);
        let big = partition_sizes(20_000, 72).unwrap();
        assert_eq!(big.iter().filter(|&&s| s == 278).count(), 56);
        assert_eq!(big.iter().filter(|&&s| s == 277).count(), 16);
        assert_eq!(big.iter().sum::<usize>(), 20_000);
        assert!(partition_sizes(3, 4).is_err());
        assert!(partition_sizes(3, 0).is_err());
    }

    #[test]
    fn slices_and_truncation() {
        let mut lin = Lineage::default();
        let a = lin.insert(source(2)).unwrap();
        let b = lin.insert(source(2)).unwrap();
        let z = lin
            .insert(Node {
                kind: NodeKind::Zip { parents: vec![a, b] },
                num_partitions: 2,
                counts: Some(vec![1, 1]),
            })
            .unwrap();
        let m = lin
            .insert(Node {
                kind: NodeKind::Map {
                    parent: z,
                    spec: MapSpec::new("identity"),
                },
                num_partitions: 2,
                counts: Some(vec![1, 1]),
            })
            .unwrap();
        assert_eq!(lin.depth(m).unwrap(), 2);
        assert_eq!(lin.slice(m).unwrap().len(), 4);
        lin.make_source(m, vec![1, 1]).unwrap();
        assert_eq!(lin.depth(m).unwrap(), 0);
        let dead = lin.retain_ancestors_of(&[m]).unwrap();
        assert_eq!(dead, vec![a, b, z]);
        assert!(lin
            .insert(Node {
                kind: NodeKind::Unbundle { parent: a, slot: 0 },
                num_partitions: 2,
                counts: None,
            })
            .is_err());
    }
}
