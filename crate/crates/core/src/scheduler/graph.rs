use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use super::layer::{resident_accum, resident_scratch};
use super::{
    plan_layers, schedule_layer, traffic_totals, Capacity, FusedLayer, LayerSchedule, SchedError, Strategy,
    TrafficStats,
};
use crate::archspec::ArchConfig;
use crate::nnir::{Graph, NodeId};

/// Local-memory placement for the local-resident strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Residency {
    /// Vector range of every materialized tensor, keyed by producing node.
    pub tensors: BTreeMap<NodeId, Range<usize>>,
    /// Per layer: weights followed by gather scratch, live only while the
    /// layer runs.
    pub scratch: Vec<Range<usize>>,
    /// Highest local address in use, per layer.
    pub high_water: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GraphSchedule {
    pub requested: Strategy,
    /// Strategy actually applied (`Auto` resolves to one of the others).
    pub strategy: Strategy,
    pub layers: Vec<LayerSchedule>,
    pub residency: Option<Residency>,
    pub capacity_local: usize,
    pub capacity_accum: usize,
}

impl GraphSchedule {
    pub fn totals(&self) -> TrafficStats {
        traffic_totals(&self.layers)
    }

    pub fn capacity(&self) -> Capacity {
        Capacity {
            local: self.capacity_local,
            accum: self.capacity_accum,
        }
    }
}

/// Schedules every fused layer of `g`.
///
/// `LocalResident` fails unless the whole graph fits at once; `Auto` tries
/// it first and falls back to weight-stationary for the whole graph.
pub fn schedule_graph(g: &Graph, cfg: &ArchConfig, strategy: Strategy) -> Result<GraphSchedule, SchedError> {
    let layers = plan_layers(g, cfg.lanes(), cfg.fmt.raw_min())?;
    let cap = Capacity::of(cfg);
    let streamed = |s: Strategy| -> Result<GraphSchedule, SchedError> {
        let results: Vec<_> = layers.par_iter().map(|l| schedule_layer(l, cfg, s)).collect();
        Ok(GraphSchedule {
            requested: strategy,
            strategy: s,
            layers: results.into_iter().collect::<Result<_, _>>()?,
            residency: None,
            capacity_local: cap.local,
            capacity_accum: cap.accum,
        })
    };
    match strategy {
        Strategy::PartitionedWeightStationary | Strategy::InputStationary => streamed(strategy),
        Strategy::LocalResident => resident_graph(g, &layers, cfg, strategy),
        Strategy::Auto => {
            resident_graph(g, &layers, cfg, strategy).or_else(|_| streamed(Strategy::PartitionedWeightStationary))
        }
    }
}

/// First-fit allocator over vector addresses.
#[derive(Default)]
struct Arena {
    live: Vec<(Option<NodeId>, Range<usize>)>,
}

impl Arena {
    fn alloc(&mut self, owner: Option<NodeId>, size: usize) -> Range<usize> {
        let mut ranges: Vec<_> = self.live.iter().map(|(_, r)| r.clone()).collect();
        ranges.sort_by_key(|r| r.start);
        let mut at = 0;
        for r in ranges {
            if r.start >= at + size {
                break;
            }
            at = at.max(r.end);
        }
        let r = at..at + size;
        self.live.push((owner, r.clone()));
        r
    }

    fn free(&mut self, owner: Option<NodeId>) {
        self.live.retain(|(o, _)| *o != owner);
    }

    fn top(&self) -> usize {
        self.live.iter().map(|(_, r)| r.end).max().unwrap_or(0)
    }
}

fn resident_graph(
    g: &Graph,
    layers: &[FusedLayer],
    cfg: &ArchConfig,
    requested: Strategy,
) -> Result<GraphSchedule, SchedError> {
    let cap = Capacity::of(cfg);
    let lanes = cfg.lanes();
    let vb = cfg.vector_bytes();
    // last layer reading each tensor
    let mut last_use: BTreeMap<NodeId, usize> = BTreeMap::new();
    for l in layers {
        for t in std::iter::once(l.input).chain(l.skips()) {
            last_use.insert(t, l.index);
        }
    }
    let mut arena = Arena::default();
    let mut tensors = BTreeMap::new();
    let mut scratch = Vec::new();
    let mut high_water = Vec::new();
    let mut out = Vec::new();
    if !layers.is_empty() {
        let s = g.node(g.input).shape();
        tensors.insert(
            g.input,
            arena.alloc(Some(g.input), FusedLayer::tensor_vectors(s, lanes)),
        );
    }
    let mut input_loaded = false;
    for l in layers {
        let fail = |reason: String| SchedError::Infeasible {
            layer: l.name.clone(),
            reason,
        };
        let accum = resident_accum(l);
        if accum > cap.accum {
            return Err(fail(format!(
                "local-resident needs {accum} accumulator vectors, have {}",
                cap.accum
            )));
        }
        let o = arena.alloc(Some(l.output), FusedLayer::tensor_vectors(l.out_shape, lanes));
        tensors.insert(l.output, o);
        let sc = arena.alloc(None, resident_scratch(l));
        let top = arena.top();
        if top > cap.local {
            return Err(fail(format!(
                "local-resident needs {top} local vectors at this layer, have {}",
                cap.local
            )));
        }
        arena.free(None);
        scratch.push(sc);
        high_water.push(top);

        let mut s =
            schedule_layer(l, cfg, Strategy::LocalResident).map_err(|_| fail("does not fit local-resident".into()))?;
        for p in s.stages.iter_mut().flat_map(|st| st.partitions.iter_mut()) {
            p.local_vectors_used = top;
        }
        let reads_input = l.input == g.input || l.skips().any(|t| t == g.input);
        if reads_input && !input_loaded {
            s.traffic.input_bytes_loaded = FusedLayer::tensor_vectors(g.node(g.input).shape(), lanes) as u64 * vb;
            input_loaded = true;
        }
        if l.output == g.output {
            s.traffic.output_bytes_stored = FusedLayer::tensor_vectors(l.out_shape, lanes) as u64 * vb;
        }
        out.push(s);

        for (&t, &last) in &last_use {
            if last == l.index && t != g.output {
                arena.free(Some(t));
            }
        }
    }
    Ok(GraphSchedule {
        requested,
        strategy: Strategy::LocalResident,
        layers: out,
        residency: Some(Residency {
            tensors,
            scratch,
            high_water,
        }),
        capacity_local: cap.local,
        capacity_accum: cap.accum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{preset, Preset};
    use crate::nnir::build_resnet20;

    #[test]
    fn baseline_partitions_somewhere() {
        let g = build_resnet20(10);
        let s = schedule_graph(&g, &preset(Preset::Baseline), Strategy::PartitionedWeightStationary).unwrap();
        assert!(s.layers.iter().any(|l| l.stages.len() * l.partition_count() >= 2));
    }

    #[test]
    fn uram_local_resident_is_one_by_one() {
        let g = build_resnet20(10);
        let s = schedule_graph(&g, &preset(Preset::Uram), Strategy::LocalResident).unwrap();
        assert!(s.layers.iter().all(|l| l.stages.len() == 1 && l.partition_count() == 1));
        let t = s.totals();
        // graph input in, logits out, nothing else crosses DRAM
        assert_eq!(t.input_bytes_loaded, 1024 * 64);
        assert_eq!(t.output_bytes_stored, 64);
        assert_eq!(t.skip_bytes_loaded, 0);
        let auto = schedule_graph(&g, &preset(Preset::UramStrategy), Strategy::Auto).unwrap();
        assert_eq!(auto.strategy, Strategy::LocalResident);
    }

    #[test]
    fn resident_tensors_never_overlap_while_live() {
        let g = build_resnet20(10);
        let s = schedule_graph(&g, &preset(Preset::Uram), Strategy::LocalResident).unwrap();
        let res = s.residency.as_ref().unwrap();
        let layers = &s.layers;
        // a tensor is live from its producer through its last reader
        let mut live: Vec<(Range<usize>, usize, usize)> = Vec::new();
        for (t, r) in &res.tensors {
            let born = layers.iter().position(|l| l.layer.output == *t).unwrap_or(0);
            let dies = layers
                .iter()
                .filter(|l| l.layer.input == *t || l.layer.skips().any(|k| k == *t))
                .map(|l| l.layer.index)
                .max()
                .unwrap_or(layers.len());
            live.push((r.clone(), born, dies));
        }
        for (i, a) in live.iter().enumerate() {
            for b in &live[i + 1..] {
                let time = a.1 <= b.2 && b.1 <= a.2;
                let space = a.0.start < b.0.end && b.0.start < a.0.end;
                assert!(!(time && space), "{a:?} overlaps {b:?}");
            }
        }
        for (i, sc) in res.scratch.iter().enumerate() {
            assert!(sc.end <= res.high_water[i]);
            assert!(res.high_water[i] <= s.capacity_local);
        }
    }

    #[test]
    fn local_resident_fails_when_too_small() {
        let g = build_resnet20(10);
        let mut cfg = preset(Preset::Baseline);
        cfg.local_mem_kv = 4;
        let err = schedule_graph(&g, &cfg, Strategy::LocalResident).unwrap_err();
        assert!(err.to_string().contains("local-resident"), "{err}");
        let auto = schedule_graph(&g, &cfg, Strategy::Auto).unwrap();
        assert_eq!(auto.strategy, Strategy::PartitionedWeightStationary);
    }

    #[test]
    fn empty_graph_gives_empty_schedule() {
        let g = Graph {
            nodes: vec![],
            input: 0,
            output: 0,
        };
        for s in Strategy::ALL {
            assert!(schedule_graph(&g, &preset(Preset::Baseline), s)
                .unwrap()
                .layers
                .is_empty());
        }
    }

    #[test]
    fn strategies_are_deterministic() {
        let g = build_resnet20(10);
        for s in Strategy::ALL {
            let a = schedule_graph(&g, &preset(Preset::Baseline), s).unwrap();
            let b = schedule_graph(&g, &preset(Preset::Baseline), s).unwrap();
            assert_eq!(a, b);
        }
    }
}
