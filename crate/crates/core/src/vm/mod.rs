//! Instruction set, code emission, a bit-exact executor and the cycle model.

mod cost;
mod emit;
mod exec;
mod infer;
mod isa;
mod program;

use thiserror::Error;

use crate::fxp::FxpError;
use crate::nnir::NnirError;

pub use cost::{simulate_cost, CostModel, LayerCost, SimReport};
pub use emit::emit;
pub use exec::{execute, MachineState};
pub use infer::{run_inference_loop, InferenceSummary, LabeledImage, Progress};
pub use isa::{flag, Block, Instr, Opcode, SimdOp, INSTR_BYTES};
pub use program::{LayerMarker, Program, TensorSlot, PROGRAM_MAGIC, PROGRAM_VERSION};

#[derive(Debug, Error)]
pub enum VmError {
    #[error("malformed program: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{what} = {value} does not fit a 32-bit operand")]
    AddressOverflow { what: &'static str, value: usize },
    #[error("schedule does not match the target: {0}")]
    Schedule(String),
    #[error(transparent)]
    Graph(#[from] NnirError),
    #[error("weights of `{layer}`: {source}")]
    Weights { layer: String, source: FxpError },
    #[error("program was compiled for arch {program:016x}, machine is {machine:016x}")]
    Fingerprint { program: u64, machine: u64 },
    #[error("instruction {pc}: address fault in {mem}: vector {addr} beyond {size}")]
    AddressFault {
        pc: usize,
        mem: &'static str,
        addr: u64,
        size: u64,
    },
    #[error("instruction {pc}: {source}")]
    Arith { pc: usize, source: FxpError },
    #[error("instruction {pc}: {reason}")]
    Illegal { pc: usize, reason: String },
    #[error("bad input: {0}")]
    Input(String),
    #[error("empty dataset")]
    EmptyDataset,
}
