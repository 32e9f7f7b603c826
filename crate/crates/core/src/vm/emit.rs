//! Lowering a graph schedule to an instruction stream.
//!
//! DRAM0 holds the graph input followed by every saved layer output, each
//! in NHWC vector layout. DRAM1 holds one weight image per matmul layer:
//! per output block a bias row (when present) and `k * lanes` weight rows.
//!
//! Streamed local layout, per stage: weights at 0 (weight-stationary) or
//! the input window at 0 (input-stationary), then [`PIPELINE_DEPTH`]
//! rotating partition buffers. Matmul accumulators are laid out row-major
//! over the partition's blocks.

use std::collections::BTreeMap;
use std::ops::Range;

use super::isa::{Block, Instr, SimdOp};
use super::program::{LayerMarker, Program, TensorSlot};
use super::VmError;
use crate::archspec::ArchConfig;
use crate::fxp::quantize_raw;
use crate::nnir::{Graph, NodeId, TensorShape, WeightBlob};
use crate::scheduler::{
    FusedLayer, Gather, GraphSchedule, LayerKind, LayerSchedule, MatMulLowering, PostOp, Reduce, Residency, Strategy,
    WindowLowering, PIPELINE_DEPTH,
};

/// A strided window: base address and row stride, in vectors.
#[derive(Debug, Clone, Copy)]
struct Win {
    addr: usize,
    stride: usize,
}

fn win(addr: usize, stride: usize) -> Win {
    Win { addr, stride }
}

const NONE: Win = Win { addr: 0, stride: 0 };

#[derive(Default)]
struct Emitter {
    instrs: Vec<Instr>,
    overflow: Option<(&'static str, usize)>,
}

impl Emitter {
    fn op(&mut self, what: &'static str, v: usize) -> u32 {
        u32::try_from(v).unwrap_or_else(|_| {
            self.overflow.get_or_insert((what, v));
            0
        })
    }

    fn narrow(&mut self, what: &'static str, v: usize) -> u16 {
        u16::try_from(v).unwrap_or_else(|_| {
            self.overflow.get_or_insert((what, v));
            0
        })
    }

    fn blk(&mut self, what: &'static str, w: Win) -> Block {
        Block {
            addr: self.op(what, w.addr),
            stride: self.op(what, w.stride),
        }
    }

    fn config(&mut self, g: &Gather) {
        for v in [g.in_h, g.in_w, g.kernel_h, g.kernel_w, g.out_h, g.out_w] {
            self.narrow("gather dimension", v);
        }
        self.op("gather channels", g.in_c);
        self.instrs.push(Instr::Config(*g));
    }

    fn load_weights(&mut self, dram: usize, local: usize, vectors: usize) {
        let i = Instr::LoadWeights {
            dram: self.op("weight address", dram),
            local: self.op("local address", local),
            vectors: self.op("weight vectors", vectors),
        };
        self.instrs.push(i);
    }

    fn load(&mut self, src: Win, dst: Win, rows: usize, width: usize, row0: usize, flags: (bool, bool)) {
        let i = Instr::LoadActivations {
            src: self.blk("source address", src),
            dst: self.blk("local address", dst),
            rows: self.op("rows", rows),
            width: self.op("width", width),
            row0: self.op("first row", row0),
            from_local: flags.0,
            gather: flags.1,
        };
        self.instrs.push(i);
    }

    /// Plain copy from DRAM0.
    fn fetch(&mut self, src: Win, dst: Win, rows: usize, width: usize) {
        self.load(src, dst, rows, width, 0, (false, false));
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul(
        &mut self,
        bias: usize,
        weights: usize,
        input: Win,
        acc: Win,
        rows: usize,
        k_rows: usize,
        n: usize,
        accumulate: bool,
        has_bias: bool,
    ) {
        let i = Instr::MatMul {
            bias: self.op("bias address", bias),
            weights: self.op("weight address", weights),
            input: self.blk("input address", input),
            acc: self.blk("accumulator address", acc),
            rows: self.op("rows", rows),
            k_rows: self.narrow("pass rows", k_rows),
            n: self.narrow("columns", n),
            accumulate,
            has_bias,
        };
        self.instrs.push(i);
    }

    #[allow(clippy::too_many_arguments)]
    fn simd(
        &mut self,
        op: SimdOp,
        dst: Win,
        a: Win,
        b: Win,
        rows: usize,
        width: usize,
        from_acc: bool,
        accumulate: bool,
    ) {
        let i = Instr::Simd {
            op,
            dst: self.blk("destination", dst),
            a: self.blk("operand", a),
            b: self.blk("operand", b),
            rows: self.op("rows", rows),
            width: self.op("width", width),
            from_acc,
            accumulate,
        };
        self.instrs.push(i);
    }

    fn save(&mut self, dst: Win, src: Win, rows: usize, width: usize) {
        let i = Instr::SaveActivations {
            dst: self.blk("DRAM address", dst),
            src: self.blk("local address", src),
            rows: self.op("rows", rows),
            width: self.op("width", width),
        };
        self.instrs.push(i);
    }

    fn post_ops(&mut self, post: &[PostOp], out: Win, skips: &[Win], rows: usize, width: usize) {
        let mut next = skips.iter();
        for p in post {
            match p {
                PostOp::Relu => self.simd(SimdOp::Relu, out, out, NONE, rows, width, false, false),
                PostOp::Add { .. } => {
                    let s = *next.next().expect("one window per skip");
                    self.simd(SimdOp::Add, out, out, s, rows, width, false, false)
                }
            }
        }
    }

    /// All reduction passes for `blocks`, requantize into `out`, post-ops.
    /// `weights` is the local address of the first block's image.
    #[allow(clippy::too_many_arguments)]
    fn matmul_body(
        &mut self,
        l: &MatMulLowering,
        rows: usize,
        blocks: Range<usize>,
        input: Win,
        weights: usize,
        out: Win,
        post: &[PostOp],
        skips: &[Win],
    ) {
        let nb = blocks.len();
        let bv = l.block_vectors();
        let bias_row = usize::from(l.has_bias);
        for (bi, b) in blocks.enumerate() {
            let w0 = weights + bi * bv;
            for j in 0..l.k {
                self.matmul(
                    w0,
                    w0 + bias_row + j * l.lanes,
                    win(input.addr + j, input.stride),
                    win(bi, nb),
                    rows,
                    l.rows_in_pass(j),
                    l.cols_in_block(b),
                    j > 0,
                    l.has_bias,
                );
            }
        }
        self.simd(SimdOp::Identity, out, win(0, nb), NONE, rows, nb, true, false);
        self.post_ops(post, out, skips, rows, nb);
    }

    #[allow(clippy::too_many_arguments)]
    fn window_body(
        &mut self,
        w: &WindowLowering,
        lanes: usize,
        rows: usize,
        gathered: Win,
        out: Win,
        post: &[PostOp],
        skips: &[Win],
    ) {
        let cb = w.gather.in_blocks(lanes);
        self.simd(SimdOp::Identity, out, gathered, NONE, rows, cb, false, false);
        if w.reduce == Reduce::Max {
            for t in 1..w.gather.taps() {
                let tap = win(gathered.addr + t * cb, gathered.stride);
                self.simd(SimdOp::Max, out, out, tap, rows, cb, false, false);
            }
        }
        self.post_ops(post, out, skips, rows, cb);
    }
}

struct Layout<'a> {
    g: &'a Graph,
    lanes: usize,
    slots: BTreeMap<NodeId, TensorSlot>,
    /// DRAM1 vector address of each layer's weight image.
    weights: Vec<usize>,
}

impl Layout<'_> {
    fn slot(&self, t: NodeId) -> Result<Win, VmError> {
        let s = self
            .slots
            .get(&t)
            .ok_or_else(|| VmError::Schedule(format!("tensor of node {t} has no DRAM slot")))?;
        Ok(win(s.addr as usize, s.blocks(self.lanes)))
    }

    fn skip_slots(&self, l: &FusedLayer) -> Result<Vec<Win>, VmError> {
        l.skips().map(|t| self.slot(t)).collect()
    }
}

fn slot_of(addr: usize, s: TensorShape) -> TensorSlot {
    TensorSlot {
        addr: addr as u32,
        h: s.h as u32,
        w: s.w as u32,
        c: s.c as u32,
    }
}

/// Appends `vals` as one vector of `lanes` elements, zero-padded.
fn push_vector(out: &mut Vec<u8>, lanes: usize, eb: usize, vals: impl Iterator<Item = i64>) {
    let start = out.len();
    for v in vals.take(lanes) {
        out.extend_from_slice(&v.to_le_bytes()[..eb]);
    }
    out.resize(start + lanes * eb, 0);
}

fn weight_image(
    out: &mut Vec<u8>,
    g: &Graph,
    blob: &WeightBlob,
    layer: &FusedLayer,
    l: &MatMulLowering,
    cfg: &ArchConfig,
) -> Result<(), VmError> {
    let wref = g
        .node(layer.anchor)
        .weights
        .as_ref()
        .ok_or_else(|| VmError::Schedule(format!("`{}` has no weights", layer.name)))?;
    let (kernel, bias) = blob.get(wref);
    let q = |v: f32| {
        quantize_raw(v, cfg.fmt).map_err(|source| VmError::Weights {
            layer: layer.name.clone(),
            source,
        })
    };
    let kq: Vec<i64> = kernel.iter().map(|&v| q(v)).collect::<Result<_, _>>()?;
    let bq: Option<Vec<i64>> = bias.map(|b| b.iter().map(|&v| q(v)).collect()).transpose()?;
    let (lanes, eb) = (l.lanes, cfg.fmt.bytes() as usize);
    for b in 0..l.n_blocks {
        let cols = b * lanes..b * lanes + l.cols_in_block(b);
        if let Some(bq) = &bq {
            push_vector(out, lanes, eb, bq[cols.clone()].iter().copied());
        }
        for f in 0..l.k * lanes {
            if f < l.reduction {
                push_vector(out, lanes, eb, cols.clone().map(|c| kq[f * l.n + c]));
            } else {
                push_vector(out, lanes, eb, std::iter::empty());
            }
        }
    }
    Ok(())
}

/// Lowers `gs` (scheduled for `cfg`) to a program.
pub fn emit(gs: &GraphSchedule, g: &Graph, blob: &WeightBlob, cfg: &ArchConfig) -> Result<Program, VmError> {
    let lanes = cfg.lanes();
    let vb = cfg.vector_bytes() as usize;
    if gs.capacity_local != cfg.local_vectors() as usize || gs.capacity_accum != cfg.accum_vectors() as usize {
        return Err(VmError::Schedule(format!(
            "scheduled for {} local / {} accumulator vectors, target has {} / {}",
            gs.capacity_local,
            gs.capacity_accum,
            cfg.local_vectors(),
            cfg.accum_vectors()
        )));
    }
    if let Some(l) = gs.layers.iter().find(|l| l.layer.lanes != lanes) {
        return Err(VmError::Schedule(format!(
            "`{}` was planned for {} lanes",
            l.layer.name, l.layer.lanes
        )));
    }
    let mut p = Program {
        fingerprint: cfg.fingerprint(),
        lanes: lanes as u32,
        dram0_vectors: 0,
        input: TensorSlot::default(),
        output: TensorSlot::default(),
        layers: vec![],
        instrs: vec![],
        consts: vec![],
    };
    if g.is_empty() {
        return Ok(p);
    }
    blob.check_refs(g)?;

    let resident = gs.strategy == Strategy::LocalResident;
    let mut slots = BTreeMap::new();
    let mut next = 0usize;
    let mut place = |t: NodeId, s: TensorShape| {
        slots.insert(t, slot_of(next, s));
        next += FusedLayer::tensor_vectors(s, lanes);
    };
    place(g.input, g.node(g.input).shape());
    for ls in &gs.layers {
        if !resident || ls.layer.output == g.output {
            place(ls.layer.output, ls.layer.out_shape);
        }
    }
    let mut weights = vec![0; gs.layers.len()];
    for (i, ls) in gs.layers.iter().enumerate() {
        if let Some(l) = ls.layer.matmul() {
            weights[i] = p.consts.len() / vb;
            weight_image(&mut p.consts, g, blob, &ls.layer, l, cfg)?;
        }
    }
    p.dram0_vectors = u32::try_from(next).map_err(|_| VmError::AddressOverflow {
        what: "DRAM0 size",
        value: next,
    })?;
    let layout = Layout {
        g,
        lanes,
        slots,
        weights,
    };

    let mut e = Emitter::default();
    let mut input_loaded = false;
    for (i, ls) in gs.layers.iter().enumerate() {
        let start = e.instrs.len();
        let saved = match ls.strategy {
            Strategy::LocalResident => {
                let res = gs
                    .residency
                    .as_ref()
                    .ok_or_else(|| VmError::Schedule("local-resident layer without a residency map".into()))?;
                resident_layer(&mut e, &layout, ls, i, res, &mut input_loaded)?
            }
            Strategy::PartitionedWeightStationary | Strategy::InputStationary => {
                streamed_layer(&mut e, &layout, ls, i)?;
                true
            }
            Strategy::Auto => {
                return Err(VmError::Schedule(format!(
                    "`{}` has an unresolved strategy",
                    ls.layer.name
                )))
            }
        };
        p.layers.push(LayerMarker {
            name: ls.layer.name.clone(),
            start: start as u32,
            end: e.instrs.len() as u32,
            saved: saved.then(|| layout.slots[&ls.layer.output]),
        });
    }
    if let Some((what, value)) = e.overflow {
        return Err(VmError::AddressOverflow { what, value });
    }
    p.instrs = e.instrs;
    p.input = layout.slots[&g.input];
    p.output = *layout
        .slots
        .get(&g.output)
        .ok_or_else(|| VmError::Schedule("graph output is not produced by any layer".into()))?;
    Ok(p)
}

fn streamed_layer(e: &mut Emitter, lay: &Layout, ls: &LayerSchedule, idx: usize) -> Result<(), VmError> {
    let layer = &ls.layer;
    let lanes = lay.lanes;
    let d = PIPELINE_DEPTH;
    let s = layer.skip_count();
    let input = lay.slot(layer.input)?;
    let output = lay.slot(layer.output)?;
    let skip_slots = lay.skip_slots(layer)?;
    let cb = layer.out_blocks();
    let load_skips = |e: &mut Emitter, skips: &[Win], r0: usize, b0: usize, rows: usize, width: usize| {
        for (src, dst) in skip_slots.iter().zip(skips) {
            e.fetch(win(src.addr + r0 * cb + b0, cb), *dst, rows, width);
        }
    };
    match &layer.kind {
        LayerKind::MatMul(l) if ls.strategy == Strategy::InputStationary => {
            let bv = l.block_vectors();
            e.config(&l.gather);
            for st in &ls.stages {
                let (ms, r0) = (st.rows.len(), st.rows.start);
                let window = win(0, l.k);
                e.load(input, window, ms, l.k, r0, (false, true));
                let alloc = st.partitions[0].blocks.len();
                let buf = alloc * (bv + ms * (1 + s));
                for (pi, p) in st.partitions.iter().enumerate() {
                    let base = ms * l.k + (pi % d) * buf;
                    let (nb, b0) = (p.blocks.len(), p.blocks.start);
                    e.load_weights(lay.weights[idx] + b0 * bv, base, nb * bv);
                    let out = win(base + alloc * bv, nb);
                    let skips: Vec<Win> = (0..s).map(|i| win(out.addr + ms * alloc * (1 + i), nb)).collect();
                    load_skips(e, &skips, r0, b0, ms, nb);
                    e.matmul_body(l, ms, p.blocks.clone(), window, base, out, &layer.post, &skips);
                    e.save(win(output.addr + r0 * cb + b0, cb), out, ms, nb);
                }
            }
        }
        LayerKind::MatMul(l) => {
            let bv = l.block_vectors();
            e.config(&l.gather);
            for st in &ls.stages {
                let nb = st.blocks.len();
                let w = nb * bv;
                e.load_weights(lay.weights[idx] + st.blocks.start * bv, 0, w);
                let alloc = st.partitions[0].rows.len();
                let buf = alloc * (l.k + nb * (1 + s));
                for (pi, p) in st.partitions.iter().enumerate() {
                    let base = w + (pi % d) * buf;
                    let (rows, r0, b0) = (p.rows.len(), p.rows.start, p.blocks.start);
                    let window = win(base, l.k);
                    let out = win(base + alloc * l.k, nb);
                    let skips: Vec<Win> = (0..s).map(|i| win(out.addr + alloc * nb * (1 + i), nb)).collect();
                    e.load(input, window, rows, l.k, r0, (false, true));
                    load_skips(e, &skips, r0, b0, rows, nb);
                    e.matmul_body(l, rows, p.blocks.clone(), window, 0, out, &layer.post, &skips);
                    e.save(win(output.addr + r0 * cb + b0, cb), out, rows, nb);
                }
            }
        }
        LayerKind::Window(wl) => {
            let g = &wl.gather;
            let in_row = g.row_vectors(lanes);
            let identity = g.is_identity();
            if !identity {
                e.config(g);
            }
            for st in &ls.stages {
                let alloc = st.partitions[0].rows.len();
                let per_row = in_row + cb * (1 + s);
                for (pi, p) in st.partitions.iter().enumerate() {
                    let base = (pi % d) * alloc * per_row;
                    let (rows, r0) = (p.rows.len(), p.rows.start);
                    let gathered = win(base, in_row);
                    let out = win(base + alloc * in_row, cb);
                    let skips: Vec<Win> = (0..s).map(|i| win(out.addr + alloc * cb * (1 + i), cb)).collect();
                    if identity {
                        e.fetch(
                            win(input.addr + r0 * input.stride, input.stride),
                            gathered,
                            rows,
                            in_row,
                        );
                    } else {
                        e.load(input, gathered, rows, in_row, r0, (false, true));
                    }
                    load_skips(e, &skips, r0, 0, rows, cb);
                    e.window_body(wl, lanes, rows, gathered, out, &layer.post, &skips);
                    e.save(win(output.addr + r0 * cb, cb), out, rows, cb);
                }
            }
        }
        LayerKind::GlobalPool { pixels } => {
            let out = win(0, cb);
            let skips: Vec<Win> = (0..s).map(|i| win(cb * (1 + i), cb)).collect();
            let fixed = cb * (1 + s);
            let parts: Vec<_> = ls.partitions().collect();
            let alloc = parts[0].rows.len();
            for (pi, p) in parts.iter().enumerate() {
                let buf = win(fixed + (pi % d) * alloc * cb, cb);
                let (rows, r0) = (p.rows.len(), p.rows.start);
                e.fetch(win(input.addr + r0 * cb, cb), buf, rows, cb);
                e.simd(SimdOp::Accumulate, NONE, buf, NONE, rows, cb, false, pi > 0);
            }
            e.simd(SimdOp::Mean, out, win(0, cb), win(*pixels, 0), 1, cb, true, false);
            load_skips(e, &skips, 0, 0, 1, cb);
            e.post_ops(&layer.post, out, &skips, 1, cb);
            e.save(output, out, 1, cb);
        }
    }
    Ok(())
}

/// Returns whether the layer saved its output to DRAM0.
fn resident_layer(
    e: &mut Emitter,
    lay: &Layout,
    ls: &LayerSchedule,
    idx: usize,
    res: &Residency,
    input_loaded: &mut bool,
) -> Result<bool, VmError> {
    let layer = &ls.layer;
    let lanes = lay.lanes;
    let g = lay.g;
    let pin = |t: NodeId| -> Result<usize, VmError> {
        res.tensors
            .get(&t)
            .map(|r| r.start)
            .ok_or_else(|| VmError::Schedule(format!("tensor of node {t} is not resident")))
    };
    let scratch = res
        .scratch
        .get(idx)
        .ok_or_else(|| VmError::Schedule(format!("no scratch for `{}`", layer.name)))?
        .start;
    let reads_input = layer.input == g.input || layer.skips().any(|t| t == g.input);
    if reads_input && !*input_loaded {
        let src = lay.slot(g.input)?;
        let pixels = g.node(g.input).shape().pixels();
        e.fetch(src, win(pin(g.input)?, src.stride), pixels, src.stride);
        *input_loaded = true;
    }
    let cb = layer.out_blocks();
    let cb_in = layer.in_blocks();
    let out = win(pin(layer.output)?, cb);
    let skips: Vec<Win> = layer
        .skips()
        .map(|t| Ok(win(pin(t)?, cb)))
        .collect::<Result<_, VmError>>()?;
    let input = win(pin(layer.input)?, cb_in);
    let rows = layer.rows();
    match &layer.kind {
        LayerKind::MatMul(l) => {
            e.load_weights(lay.weights[idx], scratch, l.weight_vectors());
            let window = if l.gather.is_identity() {
                input
            } else {
                e.config(&l.gather);
                let w = win(scratch + l.weight_vectors(), l.k);
                e.load(input, w, l.m, l.k, 0, (true, true));
                w
            };
            e.matmul_body(l, l.m, 0..l.n_blocks, window, scratch, out, &layer.post, &skips);
        }
        LayerKind::Window(wl) => {
            let window = if wl.gather.is_identity() {
                input
            } else {
                e.config(&wl.gather);
                let w = win(scratch, wl.gather.row_vectors(lanes));
                e.load(input, w, rows, w.stride, 0, (true, true));
                w
            };
            e.window_body(wl, lanes, rows, window, out, &layer.post, &skips);
        }
        LayerKind::GlobalPool { pixels } => {
            e.simd(SimdOp::Accumulate, NONE, input, NONE, *pixels, cb, false, false);
            e.simd(SimdOp::Mean, out, win(0, cb), win(*pixels, 0), 1, cb, true, false);
            e.post_ops(&layer.post, out, &skips, 1, cb);
        }
    }
    if layer.output == g.output {
        e.save(lay.slot(layer.output)?, out, rows, cb);
        return Ok(true);
    }
    Ok(false)
}
