//! Accelerator architecture description and device capacities.
//!
//! Every on-chip memory size is expressed in KV (kilovectors): 1024 vectors,
//! each vector holding `array_cols` datapath elements. For the 32-wide
//! 16-bit configuration one vector is 64 bytes and one KV is 64 KiB.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Vectors per KV.
pub const VECTORS_PER_KV: u64 = 1024;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("invalid fixed-point format: {0}")]
    Format(String),
    #[error("invalid architecture: {0}")]
    Invalid(String),
    #[error("invalid device profile: {0}")]
    Device(String),
    #[error("unknown preset `{0}` (expected baseline, dualclock, uram or uram_strategy)")]
    UnknownPreset(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error in {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    RoundToNearestEven,
    /// Round toward negative infinity (arithmetic shift semantics).
    Truncate,
}

impl fmt::Display for Rounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rounding::RoundToNearestEven => f.write_str("round-to-nearest-even"),
            Rounding::Truncate => f.write_str("truncate"),
        }
    }
}

impl FromStr for Rounding {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "round-to-nearest-even" | "rne" => Ok(Rounding::RoundToNearestEven),
            "truncate" | "floor" => Ok(Rounding::Truncate),
            other => Err(ArchError::Format(format!("unknown rounding mode `{other}`"))),
        }
    }
}

/// Signed fixed-point datatype: `width_bits` total, `binary_point` fractional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedFormat {
    pub width_bits: u32,
    pub binary_point: u32,
    pub rounding: Rounding,
}

impl FixedFormat {
    pub fn new(width_bits: u32, binary_point: u32, rounding: Rounding) -> Result<Self, ArchError> {
        let fmt = FixedFormat {
            width_bits,
            binary_point,
            rounding,
        };
        fmt.check()?;
        Ok(fmt)
    }

    /// Q8.8 with round-to-nearest-even, the default datapath type.
    pub const fn q8_8() -> Self {
        FixedFormat {
            width_bits: 16,
            binary_point: 8,
            rounding: Rounding::RoundToNearestEven,
        }
    }

    pub fn check(&self) -> Result<(), ArchError> {
        if ![8, 16, 32].contains(&self.width_bits) {
            return Err(ArchError::Format(format!(
                "width_bits must be 8, 16 or 32, got {}",
                self.width_bits
            )));
        }
        if self.binary_point == 0 || self.binary_point >= self.width_bits {
            return Err(ArchError::Format(format!(
                "binary_point must satisfy 0 < bp < {}, got {}",
                self.width_bits, self.binary_point
            )));
        }
        Ok(())
    }

    pub fn bytes(&self) -> u64 {
        u64::from(self.width_bits / 8)
    }

    pub fn raw_min(&self) -> i64 {
        -(1i64 << (self.width_bits - 1))
    }

    pub fn raw_max(&self) -> i64 {
        (1i64 << (self.width_bits - 1)) - 1
    }

    /// Value of one unit in the last place.
    pub fn ulp(&self) -> f64 {
        (-(self.binary_point as f64)).exp2()
    }
}

impl fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Q{}.{} ({})",
            self.width_bits - self.binary_point,
            self.binary_point,
            self.rounding
        )
    }
}

/// The accelerator parameter set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    pub array_rows: u32,
    pub array_cols: u32,
    pub fmt: FixedFormat,
    pub local_mem_kv: u64,
    pub accum_kv: u64,
    pub accel_port_bits: u32,
    pub host_port_bits: u32,
    pub accel_clock_hz: u64,
    pub host_clock_hz: u64,
    pub dram_ports: u32,
    /// Map local memory onto UltraRAM instead of block RAM.
    pub ultra_ram: bool,
}

impl ArchConfig {
    pub fn check(&self) -> Result<(), ArchError> {
        self.fmt.check()?;
        if self.array_rows == 0 || self.array_cols == 0 {
            return Err(ArchError::Invalid("array dimensions must be > 0".into()));
        }
        if self.array_rows != self.array_cols {
            return Err(ArchError::Invalid(format!(
                "only square arrays are supported, got {}x{}",
                self.array_rows, self.array_cols
            )));
        }
        if self.local_mem_kv == 0 || self.accum_kv == 0 {
            return Err(ArchError::Invalid("memory sizes must be > 0".into()));
        }
        for (name, bits) in [
            ("accel_port_bits", self.accel_port_bits),
            ("host_port_bits", self.host_port_bits),
        ] {
            if bits == 0 || bits % 8 != 0 {
                return Err(ArchError::Invalid(format!(
                    "{name} must be a positive multiple of 8, got {bits}"
                )));
            }
        }
        if self.accel_clock_hz == 0 || self.host_clock_hz == 0 {
            return Err(ArchError::Invalid("clocks must be > 0".into()));
        }
        if self.dram_ports == 0 {
            return Err(ArchError::Invalid("dram_ports must be > 0".into()));
        }
        Ok(())
    }

    /// Bytes per vector: `array_cols` elements of the datapath type.
    pub fn vector_bytes(&self) -> u64 {
        u64::from(self.array_cols) * self.fmt.bytes()
    }

    pub fn lanes(&self) -> usize {
        self.array_cols as usize
    }

    pub fn local_vectors(&self) -> u64 {
        self.local_mem_kv * VECTORS_PER_KV
    }

    pub fn accum_vectors(&self) -> u64 {
        self.accum_kv * VECTORS_PER_KV
    }

    /// Stable 64-bit identity of this configuration, embedded in programs.
    pub fn fingerprint(&self) -> u64 {
        let canonical = serde_json::to_string(&ArchFile::from(self)).expect("arch serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: ArchFile = serde_json::from_str(text)?;
        Ok(file.into())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ArchFile::from(self)).expect("arch serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ArchError> {
        let text = read(path)?;
        let cfg = Self::from_json(&text).map_err(|source| ArchError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        cfg.check()?;
        Ok(cfg)
    }
}

/// Bytes occupied by `kv` kilovectors under `cfg`.
pub fn kv_bytes(cfg: &ArchConfig, kv: u64) -> u64 {
    kv * VECTORS_PER_KV * cfg.vector_bytes()
}

/// Flat on-disk form of [`ArchConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchFile {
    array_rows: u32,
    array_cols: u32,
    data_width_bits: u32,
    binary_point: u32,
    rounding: Rounding,
    local_mem_kv: u64,
    accum_kv: u64,
    accel_port_bits: u32,
    host_port_bits: u32,
    accel_clock_hz: u64,
    host_clock_hz: u64,
    dram_ports: u32,
    #[serde(default)]
    ultra_ram: bool,
}

impl From<&ArchConfig> for ArchFile {
    fn from(c: &ArchConfig) -> Self {
        ArchFile {
            array_rows: c.array_rows,
            array_cols: c.array_cols,
            data_width_bits: c.fmt.width_bits,
            binary_point: c.fmt.binary_point,
            rounding: c.fmt.rounding,
            local_mem_kv: c.local_mem_kv,
            accum_kv: c.accum_kv,
            accel_port_bits: c.accel_port_bits,
            host_port_bits: c.host_port_bits,
            accel_clock_hz: c.accel_clock_hz,
            host_clock_hz: c.host_clock_hz,
            dram_ports: c.dram_ports,
            ultra_ram: c.ultra_ram,
        }
    }
}

impl From<ArchFile> for ArchConfig {
    fn from(f: ArchFile) -> Self {
        ArchConfig {
            array_rows: f.array_rows,
            array_cols: f.array_cols,
            fmt: FixedFormat {
                width_bits: f.data_width_bits,
                binary_point: f.binary_point,
                rounding: f.rounding,
            },
            local_mem_kv: f.local_mem_kv,
            accum_kv: f.accum_kv,
            accel_port_bits: f.accel_port_bits,
            host_port_bits: f.host_port_bits,
            accel_clock_hz: f.accel_clock_hz,
            host_clock_hz: f.host_clock_hz,
            dram_ports: f.dram_ports,
            ultra_ram: f.ultra_ram,
        }
    }
}

/// The four published configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    Baseline,
    DualClock,
    Uram,
    UramStrategy,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Baseline, Preset::DualClock, Preset::Uram, Preset::UramStrategy];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::DualClock => "dualclock",
            Preset::Uram => "uram",
            Preset::UramStrategy => "uram_strategy",
        }
    }

    /// Measured on-board frame rate for this step, kept for side-by-side reports.
    pub fn reference_fps(&self) -> f64 {
        match self {
            Preset::Baseline => 133.54,
            Preset::DualClock => 152.04,
            Preset::Uram => 170.16,
            Preset::UramStrategy => 293.58,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" => Ok(Preset::Baseline),
            "dualclock" | "dual_clock" => Ok(Preset::DualClock),
            "uram" => Ok(Preset::Uram),
            "uram_strategy" => Ok(Preset::UramStrategy),
            _ => Err(ArchError::UnknownPreset(s.to_string())),
        }
    }
}

pub fn preset(p: Preset) -> ArchConfig {
    let baseline = ArchConfig {
        array_rows: 32,
        array_cols: 32,
        fmt: FixedFormat::q8_8(),
        local_mem_kv: 16,
        accum_kv: 4,
        accel_port_bits: 128,
        host_port_bits: 128,
        accel_clock_hz: 100_000_000,
        host_clock_hz: 100_000_000,
        dram_ports: 2,
        ultra_ram: false,
    };
    let dualclock = ArchConfig {
        accel_port_bits: 512,
        host_clock_hz: 333_000_000,
        ..baseline.clone()
    };
    match p {
        Preset::Baseline => baseline,
        Preset::DualClock => dualclock,
        Preset::Uram | Preset::UramStrategy => ArchConfig {
            local_mem_kv: 48,
            accum_kv: 20,
            ultra_ram: true,
            ..dualclock
        },
    }
}

/// Preset lookup by name.
pub fn preset_named(name: &str) -> Result<ArchConfig, ArchError> {
    Ok(preset(name.parse()?))
}

/// Target device capacities plus the fitted resource-estimation constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    pub bram36_blocks: u64,
    pub uram_blocks: u64,
    pub dsp_slices: u64,
    pub luts: u64,
    pub bram36_bytes: u64,
    pub uram_bytes: u64,
    /// Fitted: DSPs outside the array (address generation, SIMD unit).
    #[serde(default = "default_dsp_overhead")]
    pub dsp_overhead: u64,
    /// Fitted: LUTs per processing element.
    #[serde(default = "default_lut_per_pe")]
    pub lut_per_pe: u64,
    /// Fitted: LUTs for control, DMA and interconnect.
    #[serde(default = "default_lut_fixed")]
    pub lut_fixed: u64,
    /// BRAM blocks per logical block (2 models true-dual-port duplication).
    #[serde(default = "default_bram_port_factor")]
    pub bram_port_factor: u64,
}

fn default_dsp_overhead() -> u64 {
    30
}
fn default_lut_per_pe() -> u64 {
    160
}
fn default_lut_fixed() -> u64 {
    20_000
}
fn default_bram_port_factor() -> u64 {
    1
}

pub const BRAM36_BYTES: u64 = 4608;
pub const URAM_BYTES: u64 = 36864;

impl DeviceProfile {
    /// Zynq UltraScale+ XCZU7EV (ZCU104 board).
    pub fn xczu7ev() -> Self {
        DeviceProfile {
            name: "XCZU7EV".into(),
            bram36_blocks: 312,
            uram_blocks: 96,
            dsp_slices: 1728,
            luts: 230_400,
            bram36_bytes: BRAM36_BYTES,
            uram_bytes: URAM_BYTES,
            dsp_overhead: default_dsp_overhead(),
            lut_per_pe: default_lut_per_pe(),
            lut_fixed: default_lut_fixed(),
            bram_port_factor: default_bram_port_factor(),
        }
    }

    pub fn check(&self) -> Result<(), ArchError> {
        if self.bram36_bytes != BRAM36_BYTES || self.uram_bytes != URAM_BYTES {
            return Err(ArchError::Device(format!(
                "block sizes must be {BRAM36_BYTES} (BRAM36) and {URAM_BYTES} (URAM) bytes"
            )));
        }
        if self.bram_port_factor == 0 {
            return Err(ArchError::Device("bram_port_factor must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ArchError> {
        let text = read(path)?;
        let dev = Self::from_json(&text).map_err(|source| ArchError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        dev.check()?;
        Ok(dev)
    }
}

fn read(path: &Path) -> Result<String, ArchError> {
    std::fs::read_to_string(path).map_err(|source| ArchError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A reason the configuration does not fit a device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DspShortfall { required: u64, available: u64 },
    LutShortfall { required: u64, available: u64 },
    BramShortfall { required: u64, available: u64 },
    UramShortfall { required: u64, available: u64 },
    LocalMemoryExceedsDevice { required_bytes: u64, available_bytes: u64 },
    AccumulatorsExceedDevice { required_bytes: u64, available_bytes: u64 },
}

impl Violation {
    /// Discriminant name, stable across sizes.
    pub fn kind(&self) -> &'static str {
        match self {
            Violation::DspShortfall { .. } => "dsp",
            Violation::LutShortfall { .. } => "lut",
            Violation::BramShortfall { .. } => "bram",
            Violation::UramShortfall { .. } => "uram",
            Violation::LocalMemoryExceedsDevice { .. } => "local-memory",
            Violation::AccumulatorsExceedDevice { .. } => "accumulators",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DspShortfall { required, available } => write!(
                f,
                "DSP shortfall {}: need {required}, device has {available}",
                required - available
            ),
            Violation::LutShortfall { required, available } => {
                write!(f, "LUT estimate {required} exceeds device {available}")
            }
            Violation::BramShortfall { required, available } => {
                write!(f, "BRAM36 blocks {required} exceed device {available}")
            }
            Violation::UramShortfall { required, available } => {
                write!(f, "URAM blocks {required} exceed device {available}")
            }
            Violation::LocalMemoryExceedsDevice {
                required_bytes,
                available_bytes,
            } => write!(
                f,
                "local memory exceeds device: {required_bytes} bytes requested, {available_bytes} available"
            ),
            Violation::AccumulatorsExceedDevice {
                required_bytes,
                available_bytes,
            } => write!(
                f,
                "accumulators exceed device: {required_bytes} bytes requested, {available_bytes} available"
            ),
        }
    }
}

/// Lists every way `cfg` fails to fit `dev`; empty when it fits.
pub fn validate(cfg: &ArchConfig, dev: &DeviceProfile) -> Vec<Violation> {
    let r = crate::bench::estimate_resources(cfg, dev);
    let mut out = Vec::new();
    if r.dsp_used > dev.dsp_slices {
        out.push(Violation::DspShortfall {
            required: r.dsp_used,
            available: dev.dsp_slices,
        });
    }
    if r.lut_estimate > dev.luts {
        out.push(Violation::LutShortfall {
            required: r.lut_estimate,
            available: dev.luts,
        });
    }
    if r.uram_used > dev.uram_blocks {
        out.push(Violation::UramShortfall {
            required: r.uram_used,
            available: dev.uram_blocks,
        });
    }
    if r.bram36_used > dev.bram36_blocks {
        out.push(Violation::BramShortfall {
            required: r.bram36_used,
            available: dev.bram36_blocks,
        });
    }
    let factor = dev.bram_port_factor.max(1);
    let bram_bytes_total = dev.bram36_blocks / factor * dev.bram36_bytes;
    let acc_bytes = kv_bytes(cfg, cfg.accum_kv);
    if acc_bytes > bram_bytes_total {
        out.push(Violation::AccumulatorsExceedDevice {
            required_bytes: acc_bytes,
            available_bytes: bram_bytes_total,
        });
    }
    let local_bytes = kv_bytes(cfg, cfg.local_mem_kv);
    let bram_left = dev.bram36_blocks.saturating_sub(r.accum_bram36) / factor * dev.bram36_bytes;
    let uram_total = if cfg.ultra_ram {
        dev.uram_blocks * dev.uram_bytes
    } else {
        0
    };
    if local_bytes > bram_left + uram_total {
        out.push(Violation::LocalMemoryExceedsDevice {
            required_bytes: local_bytes,
            available_bytes: bram_left + uram_total,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_bytes_examples() {
        let cfg = preset(Preset::Baseline);
        assert_eq!(kv_bytes(&cfg, 1), 65536);
        assert_eq!(kv_bytes(&cfg, 0), 0);
        assert_eq!(kv_bytes(&cfg, 48), 48 * 65536);
        assert_eq!(kv_bytes(&cfg, 48), 3_145_728);
    }

    #[test]
    fn presets_match_published_configs() {
        let b = preset(Preset::Baseline);
        assert_eq!((b.local_mem_kv, b.accum_kv), (16, 4));
        assert_eq!((b.array_rows, b.array_cols), (32, 32));
        let d = preset(Preset::DualClock);
        assert_eq!(d.host_clock_hz, 333_000_000);
        assert_eq!(d.host_port_bits, 128);
        assert_eq!(d.accel_port_bits, 512);
        let u = preset(Preset::Uram);
        assert_eq!((u.local_mem_kv, u.accum_kv), (48, 20));
        assert_eq!(u, preset(Preset::UramStrategy));
        assert_eq!(u.local_mem_kv + u.accum_kv, 68);
        assert!(u.local_mem_kv + u.accum_kv > b.local_mem_kv + b.accum_kv);
        for p in Preset::ALL {
            preset(p).check().unwrap();
        }
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(matches!(preset_named("turbo"), Err(ArchError::UnknownPreset(_))));
        assert_eq!(preset_named("uram-strategy").unwrap(), preset(Preset::Uram));
    }

    #[test]
    fn format_invariants() {
        assert!(FixedFormat::new(16, 8, Rounding::Truncate).is_ok());
        assert!(FixedFormat::new(16, 0, Rounding::Truncate).is_err());
        assert!(FixedFormat::new(16, 16, Rounding::Truncate).is_err());
        assert!(FixedFormat::new(12, 4, Rounding::Truncate).is_err());
    }

    #[test]
    fn rectangular_array_rejected() {
        let mut cfg = preset(Preset::Baseline);
        cfg.array_cols = 16;
        assert!(cfg.check().is_err());
        let mut cfg = preset(Preset::Baseline);
        cfg.host_port_bits = 100;
        assert!(cfg.check().is_err());
    }

    #[test]
    fn arch_file_round_trip_and_unknown_keys() {
        let cfg = preset(Preset::DualClock);
        let text = cfg.to_json();
        assert_eq!(ArchConfig::from_json(&text).unwrap(), cfg);
        let bad = text.replacen('{', "{\n  \"turbo\": true,", 1);
        let err = ArchConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("turbo"), "{err}");
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = preset(Preset::Baseline);
        assert_eq!(a.fingerprint(), preset(Preset::Baseline).fingerprint());
        assert_ne!(a.fingerprint(), preset(Preset::DualClock).fingerprint());
        assert_ne!(
            preset(Preset::DualClock).fingerprint(),
            preset(Preset::Uram).fingerprint()
        );
    }

    #[test]
    fn device_profile_defaults_and_block_sizes() {
        let dev = DeviceProfile::xczu7ev();
        dev.check().unwrap();
        let text = r#"{"name":"x","bram36_blocks":1,"uram_blocks":0,"dsp_slices":1,
            "luts":1,"bram36_bytes":4608,"uram_bytes":36864}"#;
        let parsed = DeviceProfile::from_json(text).unwrap();
        assert_eq!(parsed.dsp_overhead, 30);
        let bad = DeviceProfile {
            bram36_bytes: 4096,
            ..dev
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn validate_examples() {
        let dev = DeviceProfile::xczu7ev();
        assert_eq!(validate(&preset(Preset::Uram), &dev), vec![]);
        assert_eq!(validate(&preset(Preset::Baseline), &dev), vec![]);

        let mut huge = preset(Preset::Uram);
        huge.local_mem_kv = 1_000_000;
        let v = validate(&huge, &dev);
        assert!(v.iter().any(|v| v.kind() == "local-memory"), "{v:?}");

        let no_dsp = DeviceProfile {
            dsp_slices: 0,
            dsp_overhead: 0,
            ..dev.clone()
        };
        assert_eq!(
            validate(&preset(Preset::Baseline), &no_dsp),
            vec![Violation::DspShortfall {
                required: 1024,
                available: 0
            }]
        );
        let no_dsp_default = DeviceProfile { dsp_slices: 0, ..dev };
        assert_eq!(
            validate(&preset(Preset::Baseline), &no_dsp_default),
            vec![Violation::DspShortfall {
                required: 1054,
                available: 0
            }]
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kv_bytes_is_linear(a in 0u64..=1024, b in 0u64..=1024) {
                let cfg = preset(Preset::Baseline);
                prop_assert_eq!(kv_bytes(&cfg, a + b), kv_bytes(&cfg, a) + kv_bytes(&cfg, b));
                prop_assert_eq!(kv_bytes(&cfg, a), a * 65536);
            }

            #[test]
            fn validate_is_monotone(
                local in 1u64..400, acc in 1u64..400,
                dl in 0u64..200, da in 0u64..200,
                uram in any::<bool>(),
            ) {
                let dev = DeviceProfile::xczu7ev();
                let mut small = preset(Preset::Baseline);
                small.local_mem_kv = local;
                small.accum_kv = acc;
                small.ultra_ram = uram;
                let mut big = small.clone();
                big.local_mem_kv += dl;
                big.accum_kv += da;
                let before: Vec<_> = validate(&small, &dev).iter().map(|v| v.kind()).collect();
                let after: Vec<_> = validate(&big, &dev).iter().map(|v| v.kind()).collect();
                for kind in before {
                    prop_assert!(after.contains(&kind), "lost {} going to {:?}", kind, after);
                }
            }
        }
    }
}
