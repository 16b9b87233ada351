//! On-disk datasets: one directory per experiment.
//!
//! A dataset directory holds `meta.json` — the full generating model
//! (graph, mechanisms, noises, intervention targets, mixing map), the
//! shapes, the seed, and a checksum per numeric file — plus per-environment
//! matrices: latents `Z_<m>.csv`, observations `X_<m>.csv`, and optionally
//! scores `S_<m>.csv`, with `m = 0` the observational environment. Numeric
//! files are comma-separated with one sample per row, printed with 17
//! significant digits so values round-trip bit-exactly. Graphs also travel
//! as a small text format: a first line `n=<count>`, then one `child <-
//! parent,parent` line per node with parents, ids 1-based.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::Dag;
use crate::scm::{EnvironmentSet, MixingMap};
use crate::{Error, Result};

/// Serialize a DAG as text: `n=<count>`, then `child <- parents` lines
/// (1-based, sorted).
pub fn graph_to_text(dag: &Dag) -> String {
    let mut out = format!("n={}\n", dag.n());
    for i in 0..dag.n() {
        let parents = dag.parents(i);
        if parents.is_empty() {
            continue;
        }
        let list: Vec<String> = parents.iter().map(|&p| (p + 1).to_string()).collect();
        let _ = writeln!(out, "{} <- {}", i + 1, list.join(","));
    }
    out
}

/// Parse the text graph format. Nodes without a parent line are roots;
/// blank lines and `#` comments are skipped.
pub fn graph_from_text(text: &str) -> Result<Dag> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Structural("empty graph text".into()))?;
    let n: usize = header
        .strip_prefix("n=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| {
            Error::Structural(format!("graph text must start with `n=<count>`, got `{header}`"))
        })?;
    let mut parents = vec![Vec::new(); n];
    for line in lines {
        let Some((child, list)) = line.split_once("<-") else {
            return Err(Error::Structural(format!(
                "expected `child <- parents`, got `{line}`"
            )));
        };
        let child: usize = child
            .trim()
            .parse()
            .map_err(|_| Error::Structural(format!("bad node id in `{line}`")))?;
        if child == 0 || child > n {
            return Err(Error::Structural(format!(
                "node {child} outside 1..={n} in `{line}`"
            )));
        }
        let mut ps = Vec::new();
        for tok in list.split(',') {
            let p: usize = tok
                .trim()
                .parse()
                .map_err(|_| Error::Structural(format!("bad parent id `{tok}` in `{line}`")))?;
            if p == 0 || p > n {
                return Err(Error::Structural(format!(
                    "parent {p} outside 1..={n} in `{line}`"
                )));
            }
            ps.push(p - 1);
        }
        ps.sort_unstable();
        parents[child - 1] = ps;
    }
    Dag::new(n, parents)
}

/// Render one matrix as CSV with 17 significant digits per value.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(m.nrows() * m.ncols() * 26);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{:.16e}", m[(r, c)]);
        }
        out.push('\n');
    }
    out
}

/// Parse a CSV of floats; every row must have the same width.
pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split(',') {
            let v: f64 = tok.trim().parse().map_err(|_| {
                Error::Structural(format!("line {}: bad number `{tok}`", lineno + 1))
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Shape(format!(
                    "line {}: {} values, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Shape("empty matrix file".into()));
    }
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn sha256_hex(data: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Everything needed to regenerate or verify a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub d: usize,
    /// Rows per environment file.
    pub samples_per_env: usize,
    /// Intervened node (0-based) of environment `m + 1`.
    pub targets: Vec<usize>,
    pub hard_interventions: bool,
    pub seed: u64,
    /// The latent graph in the text format, embedded for quick reading.
    pub graph: String,
    /// The complete generating model for every environment.
    pub environments: EnvironmentSet,
    pub mixing: MixingMap,
    /// SHA-256 of each numeric file's bytes, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

/// A dataset loaded back into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// Latent samples per environment, observational first.
    pub latents: Vec<DMatrix<f64>>,
    /// Observed samples per environment, aligned with `latents`.
    pub observed: Vec<DMatrix<f64>>,
    /// Observed-space scores per environment, when the dump was requested.
    pub scores: Option<Vec<DMatrix<f64>>>,
}

/// Write a dataset directory. `latents[m]`, `observed[m]`, and (optionally)
/// `scores[m]` belong to environment `m`; `meta.json` is written last with
/// a checksum of every numeric file.
pub fn write_dataset(
    dir: &Path,
    environments: &EnvironmentSet,
    mixing: &MixingMap,
    seed: u64,
    latents: &[DMatrix<f64>],
    observed: &[DMatrix<f64>],
    scores: Option<&[DMatrix<f64>]>,
) -> Result<DatasetMeta> {
    let env_count = environments.len();
    if latents.len() != env_count || observed.len() != env_count {
        return Err(Error::Shape(format!(
            "{env_count} environments but {} latent and {} observed blocks",
            latents.len(),
            observed.len()
        )));
    }
    if let Some(s) = scores {
        if s.len() != env_count {
            return Err(Error::Shape(format!(
                "{env_count} environments but {} score blocks",
                s.len()
            )));
        }
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    let mut checksums = BTreeMap::new();
    let mut emit = |name: String, m: &DMatrix<f64>| -> Result<()> {
        let csv = matrix_to_csv(m);
        checksums.insert(name.clone(), sha256_hex(&csv));
        write_file(&dir.join(name), &csv)
    };
    for m in 0..env_count {
        emit(format!("Z_{m}.csv"), &latents[m])?;
        emit(format!("X_{m}.csv"), &observed[m])?;
        if let Some(s) = scores {
            emit(format!("S_{m}.csv"), &s[m])?;
        }
    }
    let meta = DatasetMeta {
        n: environments.n(),
        d: mixing.observed_dim(),
        samples_per_env: latents.first().map_or(0, DMatrix::nrows),
        targets: environments.targets().to_vec(),
        hard_interventions: environments.is_hard(),
        seed,
        graph: graph_to_text(environments.dag()),
        environments: environments.clone(),
        mixing: mixing.clone(),
        checksums,
    };
    let json = serde_json::to_string_pretty(&meta)?;
    write_file(&dir.join("meta.json"), &json)?;
    Ok(meta)
}

fn load_block(dir: &Path, meta: &DatasetMeta, name: String) -> Result<DMatrix<f64>> {
    let text = read_file(&dir.join(&name))?;
    if let Some(expected) = meta.checksums.get(&name) {
        let actual = sha256_hex(&text);
        if *expected != actual {
            return Err(Error::Domain(format!(
                "checksum mismatch for {name}: file was modified after writing"
            )));
        }
    }
    matrix_from_csv(&text)
}

/// Load a dataset directory, verifying recorded checksums.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&read_file(&dir.join("meta.json"))?)?;
    let env_count = meta.targets.len() + 1;
    let mut latents = Vec::with_capacity(env_count);
    let mut observed = Vec::with_capacity(env_count);
    let mut scores = Vec::with_capacity(env_count);
    let with_scores = meta.checksums.contains_key("S_0.csv");
    for m in 0..env_count {
        latents.push(load_block(dir, &meta, format!("Z_{m}.csv"))?);
        observed.push(load_block(dir, &meta, format!("X_{m}.csv"))?);
        if with_scores {
            scores.push(load_block(dir, &meta, format!("S_{m}.csv"))?);
        }
    }
    Ok(Dataset {
        meta,
        latents,
        observed,
        scores: if with_scores { Some(scores) } else { None },
    })
}

/// File name of one trial's JSON report.
pub fn trial_file_name(t: usize) -> String {
    format!("trial_{t}.json")
}

/// Dataset subdirectory for one trial.
pub fn trial_dir(root: &Path, t: usize) -> PathBuf {
    root.join(format!("trial_{t}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Dag;
    use crate::scm::{
        random_mixing_oracle_parts, CombinationRule, InterventionStyle, MechanismKind,
    };
    use crate::seed::{self, Stream};

    fn sample_parts(k: usize) -> (EnvironmentSet, MixingMap, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let (envs, mixing) = random_mixing_oracle_parts(
            &Dag::chain(3),
            MechanismKind::Quadratic,
            CombinationRule::Additive,
            InterventionStyle::Soft,
            4,
            13,
        );
        let mut latents = Vec::new();
        let mut observed = Vec::new();
        for m in 0..envs.len() {
            let mut rng = seed::rng(13, Stream::Samples, m as u64);
            let z = envs.env(m).sample_latent(k, &mut rng);
            let x = mixing.mix(&z).unwrap();
            latents.push(z);
            observed.push(x);
        }
        (envs, mixing, latents, observed)
    }

    #[test]
    fn graph_text_round_trips() {
        for dag in [Dag::chain(4), Dag::diamond(), Dag::triangle(), Dag::empty(3)] {
            let text = graph_to_text(&dag);
            assert_eq!(graph_from_text(&text).unwrap(), dag);
        }
        let diamond = graph_to_text(&Dag::diamond());
        assert_eq!(diamond, "n=4\n2 <- 1\n3 <- 1\n4 <- 2,3\n");
    }

    #[test]
    fn graph_text_rejects_malformed_input() {
        assert!(graph_from_text("").is_err());
        assert!(graph_from_text("nodes=3\n").is_err());
        assert!(graph_from_text("n=3\n2 -> 1\n").is_err());
        assert!(graph_from_text("n=3\n4 <- 1\n").is_err());
        assert!(graph_from_text("n=3\n2 <- 0\n").is_err());
        // A cycle is caught by graph construction.
        assert!(graph_from_text("n=2\n1 <- 2\n2 <- 1\n").is_err());
    }

    #[test]
    fn csv_round_trips_exactly() {
        let m = DMatrix::from_row_slice(
            2,
            3,
            &[1.0 / 3.0, -2.5e-17, 1234567.891011, f64::MIN_POSITIVE, -0.0, 9.9e300],
        );
        let text = matrix_to_csv(&m);
        let back = matrix_from_csv(&text).unwrap();
        assert_eq!(m, back, "17 significant digits must round-trip f64 exactly");
    }

    #[test]
    fn csv_rejects_ragged_and_empty_input() {
        assert!(matrix_from_csv("1,2\n3\n").is_err());
        assert!(matrix_from_csv("1,two\n").is_err());
        assert!(matrix_from_csv("\n").is_err());
    }

    #[test]
    fn dataset_round_trips_through_a_directory() {
        let (envs, mixing, latents, observed) = sample_parts(50);
        let dir = std::env::temp_dir().join("scalei_dataset_roundtrip");
        let _ = std::fs::remove_dir_all(&dir);
        let meta = write_dataset(&dir, &envs, &mixing, 13, &latents, &observed, None).unwrap();
        assert_eq!(meta.n, 3);
        assert_eq!(meta.d, 4);
        assert_eq!(meta.samples_per_env, 50);
        assert_eq!(meta.checksums.len(), 8);

        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.latents, latents);
        assert_eq!(loaded.observed, observed);
        assert!(loaded.scores.is_none());
        assert_eq!(loaded.meta.environments, envs);
        assert_eq!(loaded.meta.mixing, mixing);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn score_dump_is_loaded_when_present() {
        let (envs, mixing, latents, observed) = sample_parts(20);
        let scores: Vec<DMatrix<f64>> = observed.iter().map(|x| x * 0.5).collect();
        let dir = std::env::temp_dir().join("scalei_dataset_scores");
        let _ = std::fs::remove_dir_all(&dir);
        write_dataset(&dir, &envs, &mixing, 13, &latents, &observed, Some(&scores)).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.scores.unwrap(), scores);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn tampering_is_detected() {
        let (envs, mixing, latents, observed) = sample_parts(10);
        let dir = std::env::temp_dir().join("scalei_dataset_tamper");
        let _ = std::fs::remove_dir_all(&dir);
        write_dataset(&dir, &envs, &mixing, 13, &latents, &observed, None).unwrap();
        let target = dir.join("X_1.csv");
        let mut text = std::fs::read_to_string(&target).unwrap();
        text.push_str("0,0,0,0\n");
        std::fs::write(&target, text).unwrap();
        let err = load_dataset(&dir).unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
