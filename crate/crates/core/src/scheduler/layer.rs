use super::{
    balanced_split, Capacity, FusedLayer, LayerKind, LayerSchedule, MatMulLowering, Partition, SchedError, Stage,
    Strategy, Tile, TrafficStats, PIPELINE_DEPTH,
};
use crate::archspec::ArchConfig;

pub fn schedule_layer(layer: &FusedLayer, cfg: &ArchConfig, strategy: Strategy) -> Result<LayerSchedule, SchedError> {
    schedule_layer_with(layer, Capacity::of(cfg), cfg.vector_bytes(), strategy)
}

/// [`schedule_layer`] against an explicit capacity.
///
/// `Auto` picks local-resident when the layer fits on its own and
/// weight-stationary otherwise.
pub fn schedule_layer_with(
    layer: &FusedLayer,
    cap: Capacity,
    vector_bytes: u64,
    strategy: Strategy,
) -> Result<LayerSchedule, SchedError> {
    let mut s = match strategy {
        Strategy::PartitionedWeightStationary => streamed(layer, cap, false)?,
        Strategy::InputStationary => streamed(layer, cap, true)?,
        Strategy::LocalResident => resident(layer, cap)?,
        Strategy::Auto => resident(layer, cap).or_else(|_| streamed(layer, cap, false))?,
    };
    s.traffic = traffic(&s, vector_bytes);
    Ok(s)
}

fn infeasible(layer: &FusedLayer, reason: String) -> SchedError {
    SchedError::Infeasible {
        layer: layer.name.clone(),
        reason,
    }
}

fn tiles(l: &MatMulLowering, rows: usize, blocks: std::ops::Range<usize>) -> Vec<Tile> {
    blocks
        .flat_map(|b| {
            (0..l.k).map(move |j| Tile {
                m: rows,
                k: l.rows_in_pass(j),
                n: l.cols_in_block(b),
            })
        })
        .collect()
}

/// Local vectors taken by a layer's working set when everything it touches
/// is on chip: weights plus gather scratch (tensors are counted separately).
pub(crate) fn resident_scratch(layer: &FusedLayer) -> usize {
    let gather = |g: &super::Gather| {
        if g.is_identity() {
            0
        } else {
            g.rows() * g.row_vectors(layer.lanes)
        }
    };
    match &layer.kind {
        LayerKind::MatMul(l) => l.weight_vectors() + gather(&l.gather),
        LayerKind::Window(w) => gather(&w.gather),
        LayerKind::GlobalPool { .. } => 0,
    }
}

/// Accumulator vectors a resident layer needs.
pub(crate) fn resident_accum(layer: &FusedLayer) -> usize {
    match &layer.kind {
        LayerKind::MatMul(l) => l.m * l.n_blocks,
        LayerKind::Window(_) => 0,
        LayerKind::GlobalPool { .. } => layer.out_blocks(),
    }
}

fn whole(layer: &FusedLayer, local: usize, accum: usize) -> Vec<Stage> {
    let (rows, blocks) = match layer.kind {
        LayerKind::GlobalPool { pixels } => (pixels, layer.out_blocks()),
        _ => (layer.rows(), layer.out_blocks()),
    };
    let weight_vectors = layer.matmul().map_or(0, |l| l.weight_vectors());
    vec![Stage {
        rows: 0..rows,
        blocks: 0..blocks,
        weight_vectors,
        partitions: vec![Partition {
            rows: 0..rows,
            blocks: 0..blocks,
            tiles: layer.matmul().map_or(vec![], |l| tiles(l, rows, 0..blocks)),
            local_vectors_used: local,
            accum_vectors_used: accum,
        }],
    }]
}

/// Whole layer on chip: input, output and skip tensors plus scratch.
fn resident(layer: &FusedLayer, cap: Capacity) -> Result<LayerSchedule, SchedError> {
    let tensors = FusedLayer::tensor_vectors(layer.in_shape, layer.lanes)
        + FusedLayer::tensor_vectors(layer.out_shape, layer.lanes) * (1 + layer.skip_count());
    let local = tensors + resident_scratch(layer);
    let accum = resident_accum(layer);
    if local > cap.local || accum > cap.accum {
        return Err(infeasible(
            layer,
            format!(
                "does not fit local-resident: needs {local} local / {accum} accumulator vectors, have {} / {}",
                cap.local, cap.accum
            ),
        ));
    }
    Ok(LayerSchedule {
        layer: layer.clone(),
        strategy: Strategy::LocalResident,
        stages: whole(layer, local, accum),
        traffic: TrafficStats::default(),
    })
}

fn streamed(layer: &FusedLayer, cap: Capacity, input_stationary: bool) -> Result<LayerSchedule, SchedError> {
    let stages = match &layer.kind {
        LayerKind::MatMul(l) if input_stationary => is_matmul(layer, l, cap)?,
        LayerKind::MatMul(l) => ws_matmul(layer, l, cap)?,
        LayerKind::Window(_) => simd_rows(layer, cap)?,
        LayerKind::GlobalPool { pixels } => pool_rows(layer, *pixels, cap)?,
    };
    let strategy = if input_stationary {
        Strategy::InputStationary
    } else {
        Strategy::PartitionedWeightStationary
    };
    Ok(LayerSchedule {
        layer: layer.clone(),
        strategy,
        stages,
        traffic: TrafficStats::default(),
    })
}

/// Weight-stationary: stages split output blocks, partitions split rows.
fn ws_matmul(layer: &FusedLayer, l: &MatMulLowering, cap: Capacity) -> Result<Vec<Stage>, SchedError> {
    let skips = layer.skip_count();
    let max_rows = |nb: usize| -> usize {
        let w = nb * l.block_vectors();
        if w > cap.local {
            return 0;
        }
        let per_row = l.k + nb * (1 + skips);
        ((cap.local - w) / (PIPELINE_DEPTH * per_row))
            .min(cap.accum / nb)
            .min(l.m)
    };
    let n_stages = (1..=l.n_blocks)
        .find(|&s| max_rows(l.n_blocks.div_ceil(s)) > 0)
        .ok_or_else(|| {
            infeasible(
                layer,
                format!(
                    "one row of one output block needs {} weight + {} activation vectors and 1 accumulator vector; have {} / {}",
                    l.block_vectors(),
                    PIPELINE_DEPTH * (l.k + 1 + skips),
                    cap.local,
                    cap.accum
                ),
            )
        })?;
    Ok(balanced_split(l.n_blocks, n_stages)
        .into_iter()
        .map(|blocks| {
            let nb = blocks.len();
            let mp = max_rows(nb);
            let parts = balanced_split(l.m, l.m.div_ceil(mp));
            let alloc = parts[0].len();
            let w = nb * l.block_vectors();
            let local = w + PIPELINE_DEPTH * alloc * (l.k + nb * (1 + skips));
            Stage {
                rows: 0..l.m,
                blocks: blocks.clone(),
                weight_vectors: w,
                partitions: parts
                    .into_iter()
                    .map(|rows| Partition {
                        tiles: tiles(l, rows.len(), blocks.clone()),
                        accum_vectors_used: rows.len() * nb,
                        local_vectors_used: local,
                        blocks: blocks.clone(),
                        rows,
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Input-stationary: stages split rows (input window loaded once),
/// partitions split output blocks with their weights streamed in.
fn is_matmul(layer: &FusedLayer, l: &MatMulLowering, cap: Capacity) -> Result<Vec<Stage>, SchedError> {
    let skips = layer.skip_count();
    let max_blocks = |rows: usize| -> usize {
        let input = rows * l.k;
        if input > cap.local {
            return 0;
        }
        let per_block = l.block_vectors() + rows * (1 + skips);
        ((cap.local - input) / (PIPELINE_DEPTH * per_block))
            .min(cap.accum / rows)
            .min(l.n_blocks)
    };
    let n_stages = (1..=l.m).find(|&s| max_blocks(l.m.div_ceil(s)) > 0).ok_or_else(|| {
        infeasible(
            layer,
            format!(
                "one row and one output block need {} local vectors; have {}",
                l.k + PIPELINE_DEPTH * (l.block_vectors() + 1 + skips),
                cap.local
            ),
        )
    })?;
    Ok(balanced_split(l.m, n_stages)
        .into_iter()
        .map(|rows| {
            let nb = max_blocks(rows.len());
            let parts = balanced_split(l.n_blocks, l.n_blocks.div_ceil(nb));
            let alloc = parts[0].len();
            let local = rows.len() * l.k + PIPELINE_DEPTH * alloc * (l.block_vectors() + rows.len() * (1 + skips));
            Stage {
                rows: rows.clone(),
                blocks: 0..l.n_blocks,
                weight_vectors: alloc * l.block_vectors(),
                partitions: parts
                    .into_iter()
                    .map(|blocks| Partition {
                        tiles: tiles(l, rows.len(), blocks.clone()),
                        accum_vectors_used: rows.len() * blocks.len(),
                        local_vectors_used: local,
                        rows: rows.clone(),
                        blocks,
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Window SIMD layers: one stage, partitions split output rows.
fn simd_rows(layer: &FusedLayer, cap: Capacity) -> Result<Vec<Stage>, SchedError> {
    let cb = layer.out_blocks();
    let per_row = layer.in_row_vectors() + cb * (1 + layer.skip_count());
    let m = layer.rows();
    let mp = (cap.local / (PIPELINE_DEPTH * per_row)).min(m);
    if mp == 0 {
        return Err(infeasible(
            layer,
            format!(
                "one row needs {} local vectors; have {}",
                PIPELINE_DEPTH * per_row,
                cap.local
            ),
        ));
    }
    let parts = balanced_split(m, m.div_ceil(mp));
    let local = PIPELINE_DEPTH * parts[0].len() * per_row;
    Ok(vec![Stage {
        rows: 0..m,
        blocks: 0..cb,
        weight_vectors: 0,
        partitions: parts
            .into_iter()
            .map(|rows| Partition {
                rows,
                blocks: 0..cb,
                tiles: vec![],
                local_vectors_used: local,
                accum_vectors_used: 0,
            })
            .collect(),
    }])
}

/// Global pooling: partitions split the input pixels; sums stay in the
/// accumulators until the last partition writes the means.
fn pool_rows(layer: &FusedLayer, pixels: usize, cap: Capacity) -> Result<Vec<Stage>, SchedError> {
    let cb = layer.out_blocks();
    let fixed = cb * (1 + layer.skip_count());
    let mp = if cap.local > fixed && cap.accum >= cb {
        ((cap.local - fixed) / (PIPELINE_DEPTH * cb)).min(pixels)
    } else {
        0
    };
    if mp == 0 {
        return Err(infeasible(
            layer,
            format!(
                "one pixel needs {} local and {cb} accumulator vectors; have {} / {}",
                fixed + PIPELINE_DEPTH * cb,
                cap.local,
                cap.accum
            ),
        ));
    }
    let parts = balanced_split(pixels, pixels.div_ceil(mp));
    let local = fixed + PIPELINE_DEPTH * parts[0].len() * cb;
    Ok(vec![Stage {
        rows: 0..pixels,
        blocks: 0..cb,
        weight_vectors: 0,
        partitions: parts
            .into_iter()
            .map(|rows| Partition {
                rows,
                blocks: 0..cb,
                tiles: vec![],
                local_vectors_used: local,
                accum_vectors_used: cb,
            })
            .collect(),
    }])
}

/// DRAM bytes moved by a streamed or stand-alone resident schedule.
fn traffic(s: &LayerSchedule, vb: u64) -> TrafficStats {
    let layer = &s.layer;
    let skips = layer.skip_count();
    let mut t = TrafficStats {
        stage_count: s.stages.len(),
        partition_count: s.partition_count(),
        ..TrafficStats::default()
    };
    let bytes = |v: usize| v as u64 * vb;
    if s.strategy == Strategy::LocalResident {
        t.weight_bytes_loaded = bytes(layer.matmul().map_or(0, |l| l.weight_vectors()));
        return t;
    }
    let in_row = layer.in_row_vectors();
    match &layer.kind {
        LayerKind::MatMul(l) => {
            for st in &s.stages {
                if s.strategy == Strategy::InputStationary {
                    t.input_bytes_loaded += bytes(st.rows.len() * in_row);
                }
                for p in &st.partitions {
                    if s.strategy == Strategy::InputStationary {
                        t.weight_bytes_loaded += bytes(p.blocks.len() * l.block_vectors());
                    } else {
                        t.input_bytes_loaded += bytes(p.rows.len() * in_row);
                    }
                    t.skip_bytes_loaded += bytes(p.output_vectors() * skips);
                    t.output_bytes_stored += bytes(p.output_vectors());
                }
                if s.strategy != Strategy::InputStationary {
                    t.weight_bytes_loaded += bytes(st.weight_vectors);
                }
            }
        }
        LayerKind::Window(_) => {
            for p in s.partitions() {
                t.input_bytes_loaded += bytes(p.rows.len() * in_row);
                t.skip_bytes_loaded += bytes(p.output_vectors() * skips);
                t.output_bytes_stored += bytes(p.output_vectors());
            }
        }
        LayerKind::GlobalPool { .. } => {
            let cb = layer.out_blocks();
            for p in s.partitions() {
                t.input_bytes_loaded += bytes(p.rows.len() * in_row);
            }
            t.skip_bytes_loaded = bytes(cb * skips);
            t.output_bytes_stored = bytes(cb);
        }
    }
    t
}
