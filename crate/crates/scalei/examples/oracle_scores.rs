//! Exact score identities under linear mixing.
//!
//! With observations `X = T·Z`, the observed score is the latent score
//! pushed through the transposed pseudo-inverse, so two identities hold
//! exactly: `Tᵀ·s_X(x) = s_Z(z)`, and for any candidate decoder `U` the
//! transformed score `Uᵀ·s_X` equals `H·s_Z` with `H = (T⁺U)ᵀ`. This
//! example measures both on random points and checks that `H` stays
//! invertible for a random candidate.
//!
//! Run with: `cargo run --release -p scalei --example oracle_scores`

use nalgebra::{DMatrix, DVector};
use scalei::graph::Dag;
use scalei::scm::{random_mixing_oracle_parts, CombinationRule, InterventionStyle, MechanismKind};
use scalei::score::ScoreOracle;
use scalei::seed::{self, Stream};

fn main() -> scalei::Result<()> {
    const SEED: u64 = 21;
    const POINTS: usize = 500;
    let dag = Dag::chain(4);
    let (envs, mixing) = random_mixing_oracle_parts(
        &dag,
        MechanismKind::Nn,
        CombinationRule::Additive,
        InterventionStyle::Soft,
        6,
        SEED,
    );
    let t = mixing.matrix().clone();
    let pinv = mixing.pseudo_inverse()?;
    let oracle = ScoreOracle::new(envs, mixing)?;

    let mut rng = seed::rng(SEED, Stream::Samples, 0);
    let z = oracle.environments().observational().sample_latent(POINTS, &mut rng);

    // Candidate decoder: a random perturbation of the true mixing.
    let mut noise_rng = seed::rng(SEED, Stream::Scratch, 0);
    let normal = rand_distr::StandardNormal;
    let u = &t + 0.3
        * DMatrix::from_fn(t.nrows(), t.ncols(), |_, _| -> f64 {
            rand_distr::Distribution::sample(&normal, &mut noise_rng)
        });
    let h = (&pinv * &u).transpose();

    let mut round_trip_err = 0.0_f64;
    let mut transform_err = 0.0_f64;
    for m in 0..oracle.env_count() {
        for p in 0..POINTS {
            let zt: DVector<f64> = z.row(p).transpose();
            let xt = &t * &zt;
            let s_z = oracle.latent_score(m, &zt)?;
            let s_x = oracle.observed_score(m, &xt)?;
            round_trip_err = round_trip_err.max((t.transpose() * &s_x - &s_z).amax());
            transform_err = transform_err.max((u.transpose() * &s_x - &h * &s_z).amax());
        }
    }
    println!("max |T'·s_X - s_Z|      over {} envs x {POINTS} points: {round_trip_err:.3e}", oracle.env_count());
    println!("max |U'·s_X - H·s_Z|    over the same grid:           {transform_err:.3e}");
    println!("|det H| for the candidate decoder: {:.3e}", h.determinant().abs());
    Ok(())
}
