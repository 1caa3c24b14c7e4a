#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridseq_core::grid::{load_feeder, parse_feeder, FeederGraph};

pub fn fixture(name: &str) -> FeederGraph {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("feeders").join(name);
    load_feeder(path).expect("bundled feeder")
}

/// Random connected feeder with `2..=max_cells` cells, one or two sources,
/// occasional allowlists, tight capacities and narrow voltage bands.
pub fn random_feeder(seed: u64, max_cells: usize, max_horizon: usize) -> FeederGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=max_cells);
    let horizon = rng.gen_range(1..=max_horizon.min(n));
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
    for _ in 0..rng.gen_range(0..=2) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        let e = (a.min(b), a.max(b));
        if a != b && !edges.iter().any(|&(x, y)| (x.min(y), x.max(y)) == e) {
            edges.push(e);
        }
    }
    let dt = [0.5, 1.0, 2.0][rng.gen_range(0..3)];
    let mut text = format!("[meta]\nname = random{seed}\nhorizon = {horizon}\ndt = {dt}\n[cells]\n");
    for c in 0..n {
        let loads: Vec<String> = if rng.gen_bool(0.5) {
            vec![format!("{}", rng.gen_range(0..200))]
        } else {
            (0..horizon).map(|_| format!("{}", rng.gen_range(0..200))).collect()
        };
        let _ = write!(text, "{c} load={}", loads.join(","));
        if rng.gen_bool(0.2) {
            let _ = write!(text, " vmin2={}", rng.gen_range(0.95..0.999));
        }
        text.push('\n');
    }
    text += "[switches]\n";
    for (i, (a, b)) in edges.iter().enumerate() {
        let _ = writeln!(text, "{i} {a} {b} impedance={}", rng.gen_range(0.0..0.2));
    }
    text += "[sources]\n";
    let mut cells: Vec<usize> = (0..n).collect();
    cells.shuffle(&mut rng);
    let n_sources = rng.gen_range(1..=2.min(n - 1));
    for (i, &host) in cells.iter().take(n_sources).enumerate() {
        let _ = write!(
            text,
            "{i} host={host} capacity={} ramp={}",
            rng.gen_range(50..800),
            rng.gen_range(20..400)
        );
        if rng.gen_bool(0.25) {
            let allow: Vec<String> = (0..n)
                .filter(|&c| c != host && rng.gen_bool(0.5))
                .map(|c| c.to_string())
                .collect();
            if !allow.is_empty() {
                let _ = write!(text, " allow={}", allow.join(","));
            }
        }
        text.push('\n');
    }
    parse_feeder(&text).unwrap_or_else(|e| panic!("generated feeder invalid: {e}\n{text}"))
}
