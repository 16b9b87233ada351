//! Build a latent causal model, intervene on every node, and mix the
//! latents into observations.
//!
//! The model is a diamond graph with quadratic mechanisms. One atomic
//! intervention per node yields `n + 1` environments; a random
//! full-column-rank map lifts each latent sample into a higher-dimensional
//! observation.
//!
//! Run with: `cargo run --release -p scalei --example simulate_model`

use nalgebra::DMatrix;
use scalei::dataset::graph_to_text;
use scalei::graph::Dag;
use scalei::scm::{
    random_environments, random_scm, CombinationRule, InterventionStyle, MechanismKind, MixingMap,
};
use scalei::seed::{self, Stream};

fn row_text(m: &DMatrix<f64>, r: usize) -> String {
    let cells: Vec<String> = (0..m.ncols()).map(|c| format!("{:7.3}", m[(r, c)])).collect();
    format!("[{}]", cells.join(", "))
}

fn main() -> scalei::Result<()> {
    const SEED: u64 = 7;
    let dag = Dag::diamond();
    println!("latent graph ({} nodes, {} edges):", dag.n(), dag.edge_count());
    print!("{}", graph_to_text(&dag));

    let base = random_scm(
        &dag,
        MechanismKind::Quadratic,
        CombinationRule::Additive,
        false,
        SEED,
    );
    for i in 0..base.n() {
        println!(
            "node {i}: parents {:?}, noise {:?}",
            dag.parents(i),
            base.noise(i)
        );
    }

    let envs = random_environments(&base, MechanismKind::Quadratic, InterventionStyle::Soft, SEED)?;
    println!(
        "\n{} environments; intervention target of env m = 1..{}: {:?}",
        envs.len(),
        envs.n(),
        envs.targets()
    );

    let mixing = MixingMap::random(7, dag.n(), SEED)?;
    println!(
        "mixing: {} latents -> {} observed coordinates",
        mixing.latent_dim(),
        mixing.observed_dim()
    );

    let mut rng = seed::rng(SEED, Stream::Samples, 0);
    let z = envs.observational().sample_latent(3, &mut rng);
    let x = mixing.mix(&z)?;
    println!("\nfirst latent samples and their observations:");
    for t in 0..z.nrows() {
        println!("  z = {}", row_text(&z, t));
        println!("  x = {}", row_text(&x, t));
    }
    Ok(())
}
