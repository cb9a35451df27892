use anyhow::Result;
use drmgf::bench::toy::{toy_problem, ToyConfig};
use drmgf::metagf::Method;

fn main() -> Result<()> {
    let cfg = ToyConfig {
        methods: Method::ALL.to_vec(),
        ..ToyConfig::default()
    };
    let out = toy_problem(&cfg)?;
    println!(
        "independent optima: {:?} at {:?}",
        out.optima, out.optimum_points
    );
    for t in &out.trajectories {
        let gaps = out.gaps(t.method).unwrap_or_default();
        println!(
            "{:>13}  final losses {:?}  gap {:?}  shared {:?}  points {:?}",
            t.method.name(),
            t.final_losses,
            gaps,
            t.shared.last().unwrap(),
            t.task_points.last().unwrap()
        );
    }
    Ok(())
}
