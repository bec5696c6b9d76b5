//! Generates a request matrix and shows its row quotas and column coverage.
//!
//! Usage: `request_matrix [M] [c] [p] [seed]`

use blindfl::segmentation::RequestMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let get = |i: usize, default: usize| args.get(i).copied().unwrap_or(default);
    let (m, c) = (get(0, 10), get(1, 6));
    let p = get(2, c.div_ceil(2));
    let mut rng = ChaCha20Rng::seed_from_u64(get(3, 0) as u64);
    let r = match RequestMatrix::generate(m, c, p, &mut rng) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    };
    println!("M = {m}, c = {c}, p = {p}, quota N = {}", r.quota());
    for i in 1..=c {
        let row: String = r.row(i).iter().map(|&b| if b { '1' } else { '.' }).collect();
        println!("client {i:>2}  {row}  ({} matrices)", r.row_sums()[i - 1]);
    }
    let sums = r.column_sums();
    println!("coverage   {}", sums.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "));
    println!("min coverage {} >= p = {p}", sums.iter().min().unwrap());
}
