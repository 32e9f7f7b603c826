//! Frozen values. Changing any of these changes the compiler's output.

use sha2::{Digest, Sha256};

use sacc::archspec::{preset, Preset};
use sacc::bench::{run_suite, suite_strategy};
use sacc::nnir::{build_resnet20, random_weights};
use sacc::scheduler::schedule_graph;
use sacc::vm::emit;

#[test]
fn resnet20_mac_count() {
    // counted by hand: stem, three groups of six 3x3 convs (the first of
    // groups 2 and 3 strided, with a 1x1 projection), dense 64 -> 10
    let conv = |hw: u64, cin: u64, cout: u64, k: u64| hw * hw * cout * cin * k * k;
    let stem = conv(32, 3, 16, 3);
    let g1 = 6 * conv(32, 16, 16, 3);
    let g2 = conv(16, 16, 32, 3) + conv(16, 16, 32, 1) + 5 * conv(16, 32, 32, 3);
    let g3 = conv(8, 32, 64, 3) + conv(8, 32, 64, 1) + 5 * conv(8, 64, 64, 3);
    let fc = 64 * 10;
    let want = stem + g1 + g2 + g3 + fc;
    assert_eq!(want, 40_813_184);
    assert_eq!(build_resnet20(10).mac_count(), want);
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn program_binaries() {
    let g = build_resnet20(10);
    let blob = random_weights(&g, 1);
    let mut got = vec![];
    for p in Preset::ALL {
        let cfg = preset(p);
        let gs = schedule_graph(&g, &cfg, suite_strategy(p)).unwrap();
        let prog = emit(&gs, &g, &blob, &cfg).unwrap();
        got.push((p.name(), prog.instrs.len(), hex(&Sha256::digest(prog.to_bytes()))));
    }
    let want: [(&str, usize, &str); 4] = [
        (
            "baseline",
            495,
            "4986579a3b7744d8a345431db7515483a80041f8998dc327ce6c0abd95c38446",
        ),
        (
            "dualclock",
            495,
            "10f731828e8ade316928bbd0deb03852756317f95a75f7fec89945e82c942d39",
        ),
        (
            "uram",
            435,
            "3db798837e891d41123bedb816102b103b86b1090b236192853e3e18e9c4609a",
        ),
        (
            "uram_strategy",
            402,
            "e8d9d5457e4c394dbb9ec3eca7f6a9cf7576393ab61d0c070ef2fab01a28955c",
        ),
    ];
    for ((name, n, h), (wn, wcount, wh)) in got.iter().zip(want) {
        assert_eq!((*name, *n, h.as_str()), (wn, wcount, wh));
    }
}

#[test]
fn suite_cycles() {
    let g = build_resnet20(10);
    let suite = run_suite(&g, &random_weights(&g, 1));
    let got: Vec<(u64, u64, u64)> = suite
        .rows
        .iter()
        .map(|r| {
            let e = r.result.as_ref().unwrap();
            (e.total_cycles, e.compute_cycles, e.transfer_cycles)
        })
        .collect();
    assert_eq!(
        got,
        vec![
            (411_335, 111_235, 298_120),
            (202_801, 111_235, 89_586),
            (199_756, 108_445, 89_571),
            (173_453, 159_645, 12_200),
        ]
    );
}
