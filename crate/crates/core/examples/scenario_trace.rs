//! Run a scenario, write its trace, read it back and confirm a second run is
//! identical.
use std::path::Path;

use railkit::sim::{diff_traces, read_trace, Simulation};

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "platform".into());
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("data/scenarios/{name}.yaml"));

    let mut buf = Vec::new();
    let summary = Simulation::from_file(&path).expect("scenario").run_to_trace(&mut buf).expect("trace");
    print!("{}", summary.report());

    let text = String::from_utf8(buf.clone()).unwrap();
    for line in text.lines().take(2) {
        println!("{}", if line.len() > 100 { &line[..100] } else { line });
    }

    let mut again = Vec::new();
    Simulation::from_file(&path).unwrap().run_to_trace(&mut again).unwrap();
    let d = diff_traces(&read_trace(&buf[..]).unwrap(), &read_trace(&again[..]).unwrap());
    println!("rerun: {} records compared, byte identical: {}", d.compared, buf == again);
}
