//! Per-matrix serialized sizes of the bundled LeNet-5 registry, and the
//! upload a client makes when it shares only some of them.

use blindfl::model::ShapeRegistry;
use blindfl::runtime::wire::{ClientUpdate, Item};

fn main() {
    let registry = match std::env::args().nth(1) {
        Some(path) => ShapeRegistry::load(path.as_ref()).expect("registry file"),
        None => ShapeRegistry::lenet5(),
    };
    println!("{:<14} {:>14} {:>10} {:>12}", "matrix", "shape", "params", "bytes");
    for e in &registry.entries {
        let shape = e.shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
        println!("{:<14} {:>14} {:>10} {:>12}", e.name, shape, e.param_count(), e.byte_size());
    }
    println!("{:<14} {:>14} {:>10} {:>12}", "total", "", registry.param_count(), registry.total_bytes());

    let model = registry.zero_model();
    println!("\nshared  matrix bytes  update payload");
    for n in 1..=model.len() {
        let update = ClientUpdate {
            t: 1,
            public_key: Vec::new(),
            items: model.matrices()[..n].iter().cloned().map(Item::Plain).collect(),
        };
        println!("{n:>6}  {:>12}  {:>14}", update.matrix_bytes(), update.encode().len());
    }
}
