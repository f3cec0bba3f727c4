//! Scans split seeds until the shipped corpus splits into the target
//! per-scale counts. Slow: expect millions of seeds.
//!
//!     cargo run --release --example find_split_seed [start]

use biaslab::assets::Corpora;
use biaslab::corpus::split_corpus;

const WANT: [[usize; 3]; 3] = [[326, 152, 308], [299, 157, 330], [318, 162, 306]];

fn main() {
    let start: u64 = std::env::args().nth(1).map_or(0, |a| a.parse().expect("start seed"));
    let c = Corpora::shipped();
    for seed in start.. {
        let counts = split_corpus(&c.bias, seed).expect("split").counts();
        if counts.by_scale.values().copied().eq(WANT) {
            println!("seed {seed}");
            return;
        }
        if seed % 200_000 == 0 {
            eprintln!("{seed}");
        }
    }
}
