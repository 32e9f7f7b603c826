//! Human-readable schedule dump: a stage/partition tree per layer with
//! vector budgets and byte counters.

use std::fmt::Write;

use super::{Capacity, GraphSchedule, LayerKind, LayerSchedule, TrafficStats};

fn traffic_line(out: &mut String, indent: &str, t: &TrafficStats) {
    let _ = writeln!(
        out,
        "{indent}traffic: weights {} B, input {} B, skip {} B, output {} B ({} stages, {} partitions)",
        t.weight_bytes_loaded,
        t.input_bytes_loaded,
        t.skip_bytes_loaded,
        t.output_bytes_stored,
        t.stage_count,
        t.partition_count
    );
}

pub fn layer_report(s: &LayerSchedule, cap: Capacity) -> String {
    let l = &s.layer;
    let mut out = String::new();
    let ops: Vec<String> = std::iter::once(match &l.kind {
        LayerKind::MatMul(m) => format!("matmul m={} k={} n={}", m.m, m.k, m.n),
        LayerKind::Window(w) => format!(
            "window {}x{}/{} pad {}",
            w.gather.kernel_h, w.gather.kernel_w, w.gather.stride, w.gather.padding
        ),
        LayerKind::GlobalPool { pixels } => format!("global-pool over {pixels}"),
    })
    .chain(l.post.iter().map(|p| match p {
        super::PostOp::Relu => "relu".to_string(),
        super::PostOp::Add { skip } => format!("add(node {skip})"),
    }))
    .collect();
    let _ = writeln!(
        out,
        "layer {} {} [{}] {} -> {} ({})",
        l.index,
        l.name,
        ops.join(" + "),
        l.in_shape,
        l.out_shape,
        s.strategy
    );
    for (i, st) in s.stages.iter().enumerate() {
        let _ = writeln!(
            out,
            "  stage {i}: rows {:?} blocks {:?} weights {} vectors",
            st.rows, st.blocks, st.weight_vectors
        );
        for (j, p) in st.partitions.iter().enumerate() {
            let _ = writeln!(
                out,
                "    partition {j}: rows {:?} blocks {:?} local {}/{} accum {}/{} tiles {}",
                p.rows,
                p.blocks,
                p.local_vectors_used,
                cap.local,
                p.accum_vectors_used,
                cap.accum,
                p.tiles.len()
            );
        }
    }
    traffic_line(&mut out, "  ", &s.traffic);
    out
}

pub fn schedule_report(gs: &GraphSchedule) -> String {
    let mut out = format!(
        "strategy {} (requested {}), local {} vectors, accumulators {} vectors\n",
        gs.strategy, gs.requested, gs.capacity_local, gs.capacity_accum
    );
    for l in &gs.layers {
        out.push_str(&layer_report(l, gs.capacity()));
    }
    traffic_line(&mut out, "total ", &gs.totals());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{preset, Preset};
    use crate::nnir::build_resnet20;
    use crate::scheduler::{schedule_graph, Strategy};

    #[test]
    fn report_lists_every_partition() {
        let g = build_resnet20(10);
        let s = schedule_graph(&g, &preset(Preset::Baseline), Strategy::PartitionedWeightStationary).unwrap();
        let text = schedule_report(&s);
        let parts = s.layers.iter().map(|l| l.partition_count()).sum::<usize>();
        assert_eq!(text.matches("    partition ").count(), parts);
        assert!(text.contains("g1b1.conv2 [matmul m=1024 k=5 n=16 + add(node 2) + relu]"));
        assert!(text.lines().last().unwrap().starts_with("total traffic:"));
    }
}
