use serde::Serialize;

use crate::archspec::{kv_bytes, ArchConfig, DeviceProfile};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResourceReport {
    pub dsp_used: u64,
    pub bram36_used: u64,
    pub uram_used: u64,
    pub lut_estimate: u64,
    /// BRAM36 blocks holding the accumulators (part of `bram36_used`).
    pub accum_bram36: u64,
    /// BRAM36 blocks holding local memory not placed in URAM.
    pub local_bram36: u64,
    pub fits: bool,
}

/// Maps the configuration onto device primitives.
///
/// Accumulators always go to BRAM36. Local memory goes to URAM when the
/// configuration asks for it, up to the device's URAM count; whatever does
/// not fit spills to BRAM36 like the default mapping.
pub fn estimate_resources(cfg: &ArchConfig, dev: &DeviceProfile) -> ResourceReport {
    let pes = u64::from(cfg.array_rows) * u64::from(cfg.array_cols);
    let factor = dev.bram_port_factor.max(1);
    let accum_bram36 = kv_bytes(cfg, cfg.accum_kv).div_ceil(dev.bram36_bytes) * factor;
    let local = kv_bytes(cfg, cfg.local_mem_kv);
    let uram_used = if cfg.ultra_ram {
        local.div_ceil(dev.uram_bytes).min(dev.uram_blocks)
    } else {
        0
    };
    let spill = local.saturating_sub(uram_used * dev.uram_bytes);
    let local_bram36 = spill.div_ceil(dev.bram36_bytes) * factor;
    let dsp_used = pes + dev.dsp_overhead;
    let lut_estimate = dev.lut_per_pe * pes + dev.lut_fixed;
    let bram36_used = accum_bram36 + local_bram36;
    let fits = dsp_used <= dev.dsp_slices
        && lut_estimate <= dev.luts
        && bram36_used <= dev.bram36_blocks
        && uram_used <= dev.uram_blocks;
    ResourceReport {
        dsp_used,
        bram36_used,
        uram_used,
        lut_estimate,
        accum_bram36,
        local_bram36,
        fits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{preset, Preset};

    #[test]
    fn uram_preset_on_zcu104() {
        let r = estimate_resources(&preset(Preset::Uram), &DeviceProfile::xczu7ev());
        // 20 KV accumulators: 1310720 / 4608 -> 285 blocks; 48 KV local: 3145728 / 36864 -> 86.
        assert_eq!(r.dsp_used, 1054);
        assert_eq!(r.accum_bram36, 285);
        assert_eq!(r.bram36_used, 285);
        assert_eq!(r.uram_used, 86);
        assert_eq!(r.lut_estimate, 183_840);
        assert!(r.fits);
    }

    #[test]
    fn baseline_uses_no_uram() {
        let r = estimate_resources(&preset(Preset::Baseline), &DeviceProfile::xczu7ev());
        assert_eq!(r.uram_used, 0);
        assert_eq!(r.accum_bram36, 57);
        assert_eq!(r.local_bram36, 228);
        assert_eq!(r.bram36_used, 285);
    }

    #[test]
    fn degenerate_array() {
        let mut cfg = preset(Preset::Baseline);
        cfg.array_rows = 1;
        cfg.array_cols = 1;
        cfg.local_mem_kv = 0;
        cfg.accum_kv = 0;
        let dev = DeviceProfile::xczu7ev();
        let r = estimate_resources(&cfg, &dev);
        assert_eq!(r.dsp_used, 1 + dev.dsp_overhead);
        assert_eq!((r.bram36_used, r.uram_used), (0, 0));
    }

    #[test]
    fn uram_saturates_and_spills() {
        let mut cfg = preset(Preset::Uram);
        cfg.local_mem_kv = 64; // 4 MiB -> 114 URAM wanted, 96 available
        let dev = DeviceProfile::xczu7ev();
        let r = estimate_resources(&cfg, &dev);
        assert_eq!(r.uram_used, 96);
        let spill = 64 * 65536 - 96 * 36864;
        assert_eq!(r.local_bram36, (spill as u64).div_ceil(4608));
    }

    #[test]
    fn port_factor_doubles_bram() {
        let mut dev = DeviceProfile::xczu7ev();
        dev.bram_port_factor = 2;
        let r = estimate_resources(&preset(Preset::Baseline), &dev);
        assert_eq!(r.bram36_used, 2 * 285);
        assert!(!r.fits);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn monotone_in_every_size_field(
                side in 1u32..64, local in 0u64..80, acc in 0u64..40, uram: bool,
                d_side in 0u32..8, d_local in 0u64..16, d_acc in 0u64..16,
            ) {
                let dev = DeviceProfile::xczu7ev();
                let mut a = preset(Preset::Baseline);
                (a.array_rows, a.array_cols, a.local_mem_kv, a.accum_kv, a.ultra_ram) =
                    (side, side, local, acc, uram);
                let mut b = a.clone();
                (b.array_rows, b.array_cols) = (side + d_side, side + d_side);
                b.local_mem_kv += d_local;
                b.accum_kv += d_acc;
                let (ra, rb) = (estimate_resources(&a, &dev), estimate_resources(&b, &dev));
                prop_assert!(rb.dsp_used >= ra.dsp_used);
                prop_assert!(rb.lut_estimate >= ra.lut_estimate);
                prop_assert!(rb.uram_used >= ra.uram_used);
                prop_assert!(rb.accum_bram36 >= ra.accum_bram36);
                prop_assert!(rb.bram36_used >= ra.bram36_used);
            }
        }
    }
}
