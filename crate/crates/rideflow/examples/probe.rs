use rideflow::io::instance_to_json;
use rideflow::presets;
use std::fs;

fn main() {
    fs::write("data/example_network.json", instance_to_json(&presets::rain_shine())).unwrap();
    fs::write("data/resolve_demo.json", instance_to_json(&presets::resolve_demo(0.5))).unwrap();
    println!("written");
}
