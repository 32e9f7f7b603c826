use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sacc::archspec::{preset, validate, ArchConfig, ArchError, DeviceProfile, Preset};
use sacc::bench::{estimate_resources, run_suite};
use sacc::fxp::quantize_raw;
use sacc::nnir::{
    argmax, build_resnet20, load_model, quantized_forward, random_input, random_weights, read_cifar_batch,
    reference_forward, write_model, Graph, NnirError, Tensor, WeightBlob,
};
use sacc::scheduler::{schedule_graph, schedule_report, SchedError, Strategy};
use sacc::vm::{
    emit, execute, run_inference_loop, simulate_cost, CostModel, LabeledImage, MachineState, Program, VmError,
};

#[derive(Parser)]
#[command(name = "sacc", version, about = "Systolic-array accelerator compiler and simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a random-weight ResNet20 manifest and weight blob.
    GenModel {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Schedule and emit a program.
    Compile {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long, default_value = "weight_stationary")]
        strategy: Strategy,
        #[arg(short, long, default_value = "program.bin")]
        output: PathBuf,
        /// Also write the schedule report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write a human-readable instruction listing here.
        #[arg(long)]
        listing: Option<PathBuf>,
    },
    /// Run a program on one input, or on a CIFAR-10 batch.
    Exec {
        #[arg(long)]
        program: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
        /// Input tensor as little-endian f32, NHWC. Random when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Compare against the fixed-point and float references of this model.
        #[command(flatten)]
        model: OptModelArgs,
        /// CIFAR-10 binary batch file, or a directory holding test_batch.bin.
        #[arg(long)]
        cifar: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Cost-simulate a program and print the per-layer CSV.
    Simulate {
        #[arg(long)]
        program: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long, default_value_t = CostModel::DEFAULT_OVERHEAD)]
        overhead: u64,
        /// Overlap weight and activation transfers on separate ports.
        #[arg(long)]
        port_parallel: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run the four-preset suite and write bench.csv and bench.svg.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Board power, used only to report GOP/s/W.
        #[arg(long)]
        power_watts: Option<f64>,
    },
    /// Estimate FPGA resources for a configuration.
    Resources {
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long)]
        device: Option<PathBuf>,
    },
    /// Check an architecture file and its fit on a device.
    Validate {
        arch_file: PathBuf,
        #[arg(long)]
        device: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TargetArgs {
    #[arg(long, conflicts_with = "arch")]
    preset: Option<Preset>,
    #[arg(long)]
    arch: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Model manifest (JSON). Built-in ResNet20 when absent.
    #[arg(long, requires = "weights")]
    model: Option<PathBuf>,
    /// Weight blob (little-endian f32). Random when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct OptModelArgs {
    #[arg(long = "model", requires = "reference_weights")]
    reference_model: Option<PathBuf>,
    #[arg(long = "weights")]
    reference_weights: Option<PathBuf>,
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    msg: String,
}

fn io(msg: impl ToString) -> Failure {
    Failure {
        code: 2,
        msg: msg.to_string(),
    }
}

impl From<NnirError> for Failure {
    fn from(e: NnirError) -> Self {
        io(e)
    }
}

impl From<ArchError> for Failure {
    fn from(e: ArchError) -> Self {
        io(e)
    }
}

impl From<SchedError> for Failure {
    fn from(e: SchedError) -> Self {
        let code = if matches!(e, SchedError::Graph(_)) { 2 } else { 1 };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<VmError> for Failure {
    fn from(e: VmError) -> Self {
        let code = match e {
            VmError::Format(_)
            | VmError::Io { .. }
            | VmError::Graph(_)
            | VmError::Fingerprint { .. }
            | VmError::Input(_)
            | VmError::EmptyDataset => 2,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl TargetArgs {
    fn load(&self) -> Result<ArchConfig, Failure> {
        let cfg = match &self.arch {
            Some(path) => ArchConfig::load(path)?,
            None => preset(self.preset.unwrap_or(Preset::Baseline)),
        };
        Ok(cfg)
    }
}

impl ModelArgs {
    fn load(&self) -> Result<(Graph, WeightBlob), Failure> {
        match (&self.model, &self.weights) {
            (Some(m), Some(w)) => Ok(load_model(m, w)?),
            (None, Some(w)) => {
                let g = build_resnet20(10);
                let bytes = fs::read(w).map_err(|e| io(format!("{}: {e}", w.display())))?;
                let blob = WeightBlob::from_le_bytes(&bytes)?;
                blob.check_refs(&g)?;
                Ok((g, blob))
            }
            _ => {
                let g = build_resnet20(10);
                let blob = random_weights(&g, self.seed);
                Ok((g, blob))
            }
        }
    }
}

fn load_device(path: &Option<PathBuf>) -> Result<DeviceProfile, Failure> {
    match path {
        Some(p) => Ok(DeviceProfile::load(p)?),
        None => Ok(DeviceProfile::xczu7ev()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| io(format!("{}: {e}", path.display())))
}

fn read_input(path: &Path, g: &Graph) -> Result<Tensor, Failure> {
    let bytes = fs::read(path).map_err(|e| io(format!("{}: {e}", path.display())))?;
    let shape = g.node(g.input).shape();
    if bytes.len() != shape.elements() * 4 {
        return Err(io(format!(
            "{}: expected {} f32 values, found {} bytes",
            path.display(),
            shape.elements(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(shape, data))
}

fn cifar_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("test_batch.bin")
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenModel { out_dir, seed, classes } => {
            let g = build_resnet20(classes);
            let blob = random_weights(&g, seed);
            fs::create_dir_all(&out_dir).map_err(|e| io(format!("{}: {e}", out_dir.display())))?;
            let (m, w) = (out_dir.join("resnet20.json"), out_dir.join("resnet20.bin"));
            write_model(&m, &w, &g, &blob, "resnet20")?;
            println!(
                "wrote {} and {} ({} MACs per frame)",
                m.display(),
                w.display(),
                g.mac_count()
            );
        }
        Cmd::Compile {
            model,
            target,
            strategy,
            output,
            report,
            listing,
        } => {
            let (g, blob) = model.load()?;
            let cfg = target.load()?;
            let gs = schedule_graph(&g, &cfg, strategy)?;
            let p = emit(&gs, &g, &blob, &cfg)?;
            p.save(&output)?;
            let text = schedule_report(&gs);
            print!("{text}");
            if let Some(r) = report {
                write(&r, &text)?;
            }
            if let Some(l) = listing {
                write(&l, p.listing())?;
            }
            eprintln!("wrote {} ({} instructions)", output.display(), p.instrs.len());
        }
        Cmd::Exec {
            program,
            target,
            input,
            seed,
            model,
            cifar,
            limit,
        } => {
            let cfg = target.load()?;
            let p = Program::load(&program)?;
            if let Some(dir) = cifar {
                let data: Vec<LabeledImage> = read_cifar_batch(&cifar_path(&dir), limit)?
                    .into_iter()
                    .map(LabeledImage::from)
                    .collect();
                let s = run_inference_loop(&p, &cfg, &CostModel::from_arch(&cfg), &data, 100, |pr| {
                    println!(
                        "image {:5}: label {} predicted {}  accuracy {:.4}  {:.2} fps",
                        pr.done,
                        pr.last_label,
                        pr.last_prediction,
                        pr.correct as f64 / pr.done as f64,
                        pr.mean_fps
                    )
                })?;
                println!(
                    "accuracy {:.4} over {} images, mean {:.2} fps",
                    s.accuracy, s.images, s.mean_fps
                );
                return Ok(());
            }
            let reference = match (&model.reference_model, &model.reference_weights) {
                (Some(m), Some(w)) => Some(load_model(m, w)?),
                _ => None,
            };
            let g_shape = build_resnet20(10);
            let g_in = reference.as_ref().map_or(&g_shape, |(g, _)| g);
            let x = match &input {
                Some(path) => read_input(path, g_in)?,
                None => random_input(g_in.node(g_in.input).shape(), seed),
            };
            let raws = x
                .data
                .iter()
                .map(|&v| quantize_raw(v, cfg.fmt))
                .collect::<Result<Vec<_>, _>>()
                .map_err(io)?;
            let out = execute(&p, &raws, &mut MachineState::new(&cfg))?;
            let ulp = cfg.fmt.ulp();
            let vals: Vec<String> = out.iter().map(|&v| format!("{:.4}", v as f64 * ulp)).collect();
            println!("output [{}]", vals.join(", "));
            println!("top-1 {}", argmax(&out));
            if let Some((g, blob)) = reference {
                let q = quantized_forward(&g, &blob, &x, cfg.fmt).map_err(|e| Failure {
                    code: 1,
                    msg: e.to_string(),
                })?;
                let f = reference_forward(&g, &blob, &x)?;
                let max_diff = out
                    .iter()
                    .zip(&f.data)
                    .map(|(&a, &b)| (a as f64 * ulp - f64::from(b)).abs())
                    .fold(0.0, f64::max);
                let exact = q[g.output] == out;
                println!(
                    "fixed-point reference: {}",
                    if exact { "bit-exact" } else { "MISMATCH" }
                );
                println!("float reference top-1 {}, max |diff| {max_diff:.6}", f.argmax());
                if !exact {
                    return Err(Failure {
                        code: 3,
                        msg: "output differs from the fixed-point reference".into(),
                    });
                }
            }
        }
        Cmd::Simulate {
            program,
            target,
            overhead,
            port_parallel,
            output,
        } => {
            let cfg = target.load()?;
            let p = Program::load(&program)?;
            if p.fingerprint != cfg.fingerprint() {
                return Err(VmError::Fingerprint {
                    program: p.fingerprint,
                    machine: cfg.fingerprint(),
                }
                .into());
            }
            let mut m = CostModel::from_arch(&cfg);
            m.overhead_cycles = overhead;
            m.port_parallel = port_parallel;
            let r = simulate_cost(&p, &m);
            let csv = r.to_csv();
            print!("{csv}");
            if let Some(o) = output {
                write(&o, &csv)?;
            }
            eprintln!(
                "{} cycles, {:.2} fps, latency {:.3} ms",
                r.total_cycles,
                r.fps_f64(),
                r.latency_seconds() * 1e3
            );
        }
        Cmd::Bench {
            model,
            out_dir,
            power_watts,
        } => {
            if let Some(w) = power_watts {
                if !(w.is_finite() && w > 0.0) {
                    return Err(io(format!("--power-watts must be positive, got {w}")));
                }
            }
            let (g, blob) = model.load()?;
            let suite = run_suite(&g, &blob);
            let csv = suite.to_csv(power_watts);
            fs::create_dir_all(&out_dir).map_err(|e| io(format!("{}: {e}", out_dir.display())))?;
            write(&out_dir.join("bench.csv"), &csv)?;
            write(&out_dir.join("bench.svg"), suite.to_svg())?;
            print!("{csv}");
            if let Some(bad) = suite.rows.iter().find(|r| r.result.is_err()) {
                return Err(Failure {
                    code: 1,
                    msg: format!("{}: {}", bad.preset, bad.result.as_ref().unwrap_err()),
                });
            }
            suite.check_ordering().map_err(|msg| Failure { code: 3, msg })?;
        }
        Cmd::Resources { target, device } => {
            let cfg = target.load()?;
            let dev = load_device(&device)?;
            let r = estimate_resources(&cfg, &dev);
            println!("{}", serde_json::to_string_pretty(&r).map_err(io)?);
        }
        Cmd::Validate { arch_file, device } => {
            let cfg = ArchConfig::load(&arch_file)?;
            let dev = load_device(&device)?;
            let v = validate(&cfg, &dev);
            if v.is_empty() {
                println!("{}: ok (fits {})", arch_file.display(), dev.name);
            } else {
                for x in &v {
                    println!("{}: {}", x.kind(), x);
                }
                return Err(Failure {
                    code: 1,
                    msg: format!("{} does not fit {}", arch_file.display(), dev.name),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
