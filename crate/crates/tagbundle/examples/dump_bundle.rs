//! Print a bundle geometry JSON to stdout.
//!
//! Usage: dump_bundle [leader_side_mm] [followers] [g_deg]

use tagbundle::geometry::build_bundle;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let side: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(130.0);
    let followers: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let g: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let bundle = build_bundle(side, followers, g, 0.0).expect("valid bundle");
    println!("{}", serde_json::to_string_pretty(&bundle).unwrap());
}
