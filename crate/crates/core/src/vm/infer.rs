//! Streaming a labeled dataset through a compiled program.

use rayon::prelude::*;

use super::cost::{simulate_cost, CostModel};
use super::exec::{execute, MachineState};
use super::program::Program;
use super::VmError;
use crate::archspec::ArchConfig;
use crate::fxp::quantize_raw;
use crate::nnir::{argmax, CifarRecord, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: usize,
}

impl From<CifarRecord> for LabeledImage {
    fn from(r: CifarRecord) -> Self {
        LabeledImage {
            image: r.image,
            label: usize::from(r.label),
        }
    }
}

/// Running totals, reported after every chunk of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub done: usize,
    pub correct: usize,
    pub last_label: usize,
    pub last_prediction: usize,
    /// Mean simulated frames per second so far.
    pub mean_fps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSummary {
    pub images: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_fps: f64,
    pub predictions: Vec<usize>,
}

/// Runs every image through `p`, calling `progress` after each `every`
/// images and once at the end.
pub fn run_inference_loop(
    p: &Program,
    cfg: &ArchConfig,
    cost: &CostModel,
    data: &[LabeledImage],
    every: usize,
    mut progress: impl FnMut(&Progress),
) -> Result<InferenceSummary, VmError> {
    if data.is_empty() {
        return Err(VmError::EmptyDataset);
    }
    // timing does not depend on the data, so every frame costs the same
    let fps = simulate_cost(p, cost).fps_f64();
    let mut predictions = Vec::with_capacity(data.len());
    let mut correct = 0;
    for chunk in data.chunks(every.max(1)) {
        let preds = chunk
            .par_iter()
            .map_init(
                || MachineState::new(cfg),
                |st, item| -> Result<usize, VmError> {
                    let raws = item
                        .image
                        .data
                        .iter()
                        .map(|&v| quantize_raw(v, cfg.fmt))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| VmError::Input(e.to_string()))?;
                    Ok(argmax(&execute(p, &raws, st)?))
                },
            )
            .collect::<Result<Vec<_>, _>>()?;
        for (item, &pred) in chunk.iter().zip(&preds) {
            correct += usize::from(pred == item.label);
        }
        predictions.extend_from_slice(&preds);
        let last = chunk.len() - 1;
        progress(&Progress {
            done: predictions.len(),
            correct,
            last_label: chunk[last].label,
            last_prediction: preds[last],
            mean_fps: fps,
        });
    }
    Ok(InferenceSummary {
        images: data.len(),
        correct,
        accuracy: correct as f64 / data.len() as f64,
        mean_fps: fps,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{preset, Preset};
    use crate::nnir::{build_resnet20, random_input, random_weights, reference_forward};
    use crate::scheduler::{schedule_graph, Strategy};
    use crate::vm::emit;

    fn setup() -> (Program, ArchConfig, crate::nnir::Graph, crate::nnir::WeightBlob) {
        let g = build_resnet20(10);
        let blob = random_weights(&g, 4);
        let cfg = preset(Preset::UramStrategy);
        let gs = schedule_graph(&g, &cfg, Strategy::Auto).unwrap();
        (emit(&gs, &g, &blob, &cfg).unwrap(), cfg, g, blob)
    }

    #[test]
    fn single_image_fps_is_program_fps() {
        let (p, cfg, g, _) = setup();
        let cost = CostModel::from_arch(&cfg);
        let data = vec![LabeledImage {
            image: random_input(g.input_shape(1, 0), 1),
            label: 0,
        }];
        let mut calls = 0;
        let s = run_inference_loop(&p, &cfg, &cost, &data, 100, |_| calls += 1).unwrap();
        assert_eq!(s.mean_fps, simulate_cost(&p, &cost).fps_f64());
        assert_eq!((s.images, calls), (1, 1));
    }

    #[test]
    fn self_labeled_set_agrees() {
        let (p, cfg, g, blob) = setup();
        let data: Vec<_> = (0..20)
            .map(|i| {
                let image = random_input(g.input_shape(1, 0), 100 + i);
                let label = reference_forward(&g, &blob, &image).unwrap().argmax();
                LabeledImage { image, label }
            })
            .collect();
        let mut seen = vec![];
        let s = run_inference_loop(&p, &cfg, &CostModel::from_arch(&cfg), &data, 8, |pr| seen.push(pr.done)).unwrap();
        assert_eq!(seen, vec![8, 16, 20]);
        assert!(s.accuracy >= 0.95, "agreement {}", s.accuracy);
    }

    #[test]
    fn empty_dataset_rejected() {
        let (p, cfg, _, _) = setup();
        let r = run_inference_loop(&p, &cfg, &CostModel::from_arch(&cfg), &[], 100, |_| {});
        assert!(matches!(r, Err(VmError::EmptyDataset)));
    }
}
