//! Prints the built-in reference intersection scenario as JSON.

fn main() {
    println!("{}", trustfg::scenario::reference_scenario().to_json());
}
