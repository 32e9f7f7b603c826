//! The four-step experiment suite: baseline, dual clock, UltraRAM and the
//! local-resident compiler strategy, each compiled and cost-simulated.

use num_rational::Ratio;
use rayon::prelude::*;
use serde::Serialize;

use crate::archspec::{preset, Preset};
use crate::nnir::{Graph, WeightBlob};
use crate::scheduler::{schedule_graph, Strategy};
use crate::vm::{emit, simulate_cost, CostModel, SimReport};

/// Giga-operations per frame, multiply and add counted separately.
pub fn count_gops(g: &Graph) -> f64 {
    2.0 * g.mac_count() as f64 / 1e9
}

/// GOP/s per watt. Power is never estimated, only supplied.
pub fn efficiency(throughput_gops: f64, watts: f64) -> Option<f64> {
    (watts.is_finite() && watts > 0.0).then(|| throughput_gops / watts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub preset: String,
    pub strategy: Strategy,
    pub fps: f64,
    #[serde(skip)]
    pub fps_exact: Ratio<u64>,
    pub latency_ms: f64,
    pub total_cycles: u64,
    pub compute_cycles: u64,
    pub transfer_cycles: u64,
    pub overhead_cycles: u64,
    pub bytes_moved: u64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub gops_per_frame: f64,
    pub throughput_gops: f64,
    pub stages: usize,
    pub partitions: usize,
    pub reference_fps: f64,
}

impl ExperimentResult {
    pub fn from_report(
        p: Preset,
        strategy: Strategy,
        r: &SimReport,
        gops: f64,
        stages: usize,
        partitions: usize,
    ) -> Self {
        let fps = r.fps_f64();
        ExperimentResult {
            preset: p.name().into(),
            strategy,
            fps,
            fps_exact: r.fps(),
            latency_ms: r.latency_seconds() * 1e3,
            total_cycles: r.total_cycles,
            compute_cycles: r.compute_cycles,
            transfer_cycles: r.transfer_cycles,
            overhead_cycles: r.overhead_cycles,
            bytes_moved: r.bytes_moved(),
            weight_bytes: r.weight_bytes,
            activation_bytes: r.bytes_moved() - r.weight_bytes,
            gops_per_frame: gops,
            throughput_gops: fps * gops,
            stages,
            partitions,
            reference_fps: p.reference_fps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub preset: Preset,
    pub result: Result<ExperimentResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub rows: Vec<SuiteRow>,
}

/// Strategy each preset is compiled with.
pub fn suite_strategy(p: Preset) -> Strategy {
    match p {
        Preset::UramStrategy => Strategy::LocalResident,
        _ => Strategy::PartitionedWeightStationary,
    }
}

pub fn run_experiment(g: &Graph, blob: &WeightBlob, p: Preset, strategy: Strategy) -> Result<ExperimentResult, String> {
    let cfg = preset(p);
    let gs = schedule_graph(g, &cfg, strategy).map_err(|e| e.to_string())?;
    let prog = emit(&gs, g, blob, &cfg).map_err(|e| e.to_string())?;
    let r = simulate_cost(&prog, &CostModel::from_arch(&cfg));
    let t = gs.totals();
    Ok(ExperimentResult::from_report(
        p,
        gs.strategy,
        &r,
        count_gops(g),
        t.stage_count,
        t.partition_count,
    ))
}

/// Runs all four presets; an infeasible preset is reported in its row.
pub fn run_suite(g: &Graph, blob: &WeightBlob) -> Suite {
    let rows = Preset::ALL
        .par_iter()
        .map(|&p| SuiteRow {
            preset: p,
            result: run_experiment(g, blob, p, suite_strategy(p)),
        })
        .collect();
    Suite { rows }
}

impl Suite {
    fn ok_rows(&self) -> Result<Vec<&ExperimentResult>, String> {
        self.rows
            .iter()
            .map(|r| r.result.as_ref().map_err(|e| format!("{}: {e}", r.preset.name())))
            .collect()
    }

    /// Frame rate strictly increases down the rows, and dual clock differs
    /// from baseline only in transfer time.
    pub fn check_ordering(&self) -> Result<(), String> {
        let rows = self.ok_rows()?;
        for w in rows.windows(2) {
            if w[0].fps_exact >= w[1].fps_exact {
                return Err(format!(
                    "{} ({:.2} fps) is not slower than {} ({:.2} fps)",
                    w[0].preset, w[0].fps, w[1].preset, w[1].fps
                ));
            }
        }
        let find = |name: &str| rows.iter().find(|r| r.preset == name);
        if let (Some(b), Some(d)) = (find("baseline"), find("dualclock")) {
            if b.compute_cycles != d.compute_cycles || d.transfer_cycles >= b.transfer_cycles {
                return Err("dualclock must change only transfer cycles".into());
            }
        }
        Ok(())
    }

    /// One row per preset. With `watts`, adds a GOP/s/W column.
    pub fn to_csv(&self, watts: Option<f64>) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "preset",
            "strategy",
            "fps",
            "latency_ms",
            "total_cycles",
            "compute_cycles",
            "transfer_cycles",
            "overhead_cycles",
            "bytes_moved",
            "weight_bytes",
            "activation_bytes",
            "gops_per_frame",
            "throughput_gops",
            "stages",
            "partitions",
            "reference_fps",
        ];
        if watts.is_some() {
            header.push("gops_per_watt");
        }
        header.push("error");
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec: Vec<String> = match &row.result {
                Ok(r) => {
                    let mut v = vec![
                        r.preset.clone(),
                        r.strategy.to_string(),
                        format!("{:.4}", r.fps),
                        format!("{:.4}", r.latency_ms),
                        r.total_cycles.to_string(),
                        r.compute_cycles.to_string(),
                        r.transfer_cycles.to_string(),
                        r.overhead_cycles.to_string(),
                        r.bytes_moved.to_string(),
                        r.weight_bytes.to_string(),
                        r.activation_bytes.to_string(),
                        format!("{:.6}", r.gops_per_frame),
                        format!("{:.4}", r.throughput_gops),
                        r.stages.to_string(),
                        r.partitions.to_string(),
                        format!("{:.2}", r.reference_fps),
                    ];
                    if let Some(e) = watts.and_then(|p| efficiency(r.throughput_gops, p)) {
                        v.push(format!("{e:.4}"));
                    }
                    v.push(String::new());
                    v
                }
                Err(e) => {
                    let mut v = vec![row.preset.name().to_string(), suite_strategy(row.preset).to_string()];
                    v.resize(header.len() - 1, String::new());
                    v.push(e.clone());
                    v
                }
            };
            rec.resize(header.len(), String::new());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("ASCII")
    }

    /// Monochrome bar chart of simulated frame rates.
    pub fn to_svg(&self) -> String {
        let (width, height, margin) = (640.0, 400.0, 60.0);
        let fps: Vec<f64> = self
            .rows
            .iter()
            .map(|r| r.result.as_ref().map_or(0.0, |e| e.fps))
            .collect();
        let top = fps.iter().copied().fold(1.0, f64::max) * 1.1;
        let slot = (width - 2.0 * margin) / fps.len().max(1) as f64;
        let plot_h = height - 2.0 * margin;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"12\">\n\
             <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"30\" text-anchor=\"middle\">Simulated frames per second</text>\n\
             <line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            width / 2.0,
            height - margin,
            width - margin,
            height - margin
        );
        for (i, (row, f)) in self.rows.iter().zip(&fps).enumerate() {
            let h = f / top * plot_h;
            let x = margin + i as f64 * slot + slot * 0.2;
            let y = height - margin - h;
            s.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"black\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{f:.2}</text>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                slot * 0.6,
                x + slot * 0.3,
                y - 6.0,
                x + slot * 0.3,
                height - margin + 18.0,
                row.preset.name()
            ));
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnir::{build_resnet20, infer_shapes, random_weights, DType, LayerNode, Op, TensorShape, WeightRef};

    #[test]
    fn dense_gops_and_empty_graph() {
        let g = Graph {
            nodes: vec![
                LayerNode {
                    id: 0,
                    name: "in".into(),
                    op: Op::Input,
                    inputs: vec![],
                    out_shape: None,
                    weights: None,
                },
                LayerNode {
                    id: 1,
                    name: "fc".into(),
                    op: Op::Dense { out_features: 10 },
                    inputs: vec![0],
                    out_shape: None,
                    weights: Some(WeightRef {
                        tensor: 0,
                        shape: vec![64, 10],
                        offset: 0,
                        dtype: DType::Float32,
                        bias: true,
                    }),
                },
            ],
            input: 0,
            output: 1,
        };
        let g = infer_shapes(&g, TensorShape::hwc(1, 1, 64)).unwrap();
        assert_eq!(count_gops(&g), 2.0 * 640.0 / 1e9);
        let empty = Graph {
            nodes: vec![],
            input: 0,
            output: 0,
        };
        assert_eq!(count_gops(&empty), 0.0);
    }

    #[test]
    fn efficiency_needs_power() {
        assert_eq!(efficiency(21.12, 5.21).map(|e| (e * 100.0).round() / 100.0), Some(4.05));
        assert_eq!(efficiency(21.12, 0.0), None);
        assert_eq!(efficiency(21.12, f64::NAN), None);
    }

    #[test]
    fn resnet_suite_orders_and_is_deterministic() {
        let g = build_resnet20(10);
        let blob = random_weights(&g, 7);
        let suite = run_suite(&g, &blob);
        suite.check_ordering().unwrap();
        let rows: Vec<_> = suite.rows.iter().map(|r| r.result.as_ref().unwrap()).collect();
        // the strategy step only changes data movement
        assert!(rows[3].activation_bytes < rows[2].activation_bytes);
        for r in &rows {
            assert_eq!(r.throughput_gops, r.fps * r.gops_per_frame);
        }
        let csv = suite.to_csv(None);
        assert_eq!(csv, run_suite(&g, &blob).to_csv(None));
        assert!(!csv.contains("gops_per_watt"));
        assert!(suite
            .to_csv(Some(5.21))
            .lines()
            .next()
            .unwrap()
            .contains("gops_per_watt"));
        let svg = suite.to_svg();
        assert_eq!(svg.matches("fill=\"black\"").count(), 4);
    }

    #[test]
    fn ordering_failure_is_reported() {
        let g = build_resnet20(10);
        let blob = random_weights(&g, 7);
        let mut suite = run_suite(&g, &blob);
        suite.rows.swap(0, 3);
        assert!(suite.check_ordering().is_err());
        suite.rows[1].result = Err("infeasible".into());
        assert!(suite.check_ordering().unwrap_err().contains("infeasible"));
        assert!(suite.to_csv(None).contains("infeasible"));
    }
}
