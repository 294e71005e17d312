//! Corpus generation and persistence: SIMP runs at sampled load realizations,
//! robust-compliance labels, ranking/splits, and the on-disk formats
//! (RTOD topology files, CSV manifest, PGM renders).

use crate::grid::{DensityField, GridSpec, ProblemSpec};
use crate::parallel::par_map;
use crate::robust::{robust_compliance, RobustConfig};
use crate::simp::{run_simp, SimpConfig};
use crate::{Result, RtoError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const TOPOLOGY_MAGIC: &[u8; 4] = b"RTOD";
const TOPOLOGY_VERSION: u32 = 1;

/// Which partition a corpus sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
    Excluded,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
            SplitTag::Excluded => "excluded",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "test" => Ok(SplitTag::Test),
            "excluded" => Ok(SplitTag::Excluded),
            other => Err(RtoError::Format(format!("unknown split tag '{other}'"))),
        }
    }
}

/// One labeled deterministic design.
#[derive(Debug, Clone)]
pub struct TopologySample {
    pub id: usize,
    pub xi: f64,
    pub theta: DensityField,
    pub q_rob: f64,
    pub q_mean: f64,
    pub q_std: f64,
}

/// One manifest row; the topology itself lives in the referenced file.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: usize,
    pub xi: f64,
    pub q_rob: f64,
    pub q_mean: f64,
    pub q_std: f64,
    pub split: SplitTag,
    pub path: String,
}

/// Corpus ledger: provenance metadata plus one row per sample.
#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub spec_hash: String,
    pub lambda: f64,
    pub seed: u64,
    pub rows: Vec<ManifestRow>,
}

impl CorpusManifest {
    pub fn rows_with_tag(&self, tag: SplitTag) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == tag)
    }
}

/// Stable content hash of a problem description, recorded in the manifest so
/// a corpus can be matched back to the exact spec that produced it.
pub fn spec_hash(spec: &ProblemSpec) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(format!("{spec:?}").as_bytes());
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Runs SIMP at `n` sampled realizations and labels every design with its
/// robust compliance. Samples fan out over the worker pool; the manifest is a
/// deterministic ordered merge by id.
///
/// Individual SIMP failures are skipped with a warning count; more than 5%
/// failures aborts.
pub fn generate_corpus(
    spec: &ProblemSpec,
    n: usize,
    cfg: &RobustConfig,
    simp: &SimpConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    if n == 0 {
        return Err(RtoError::Parameter("corpus size must be at least 1".into()));
    }
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let (lo, hi) = spec.load_model.xi_range();
    let xis = crate::robust::sample_xi(crate::robust::UncertainScalar { lo, hi }, n, seed);

    let results: Vec<Result<TopologySample>> = par_map(&xis, |&xi| {
        let id_xi = xi;
        let simp_result = run_simp(spec, id_xi, simp)?;
        let labels = robust_compliance(&simp_result.theta_star, spec, cfg)?;
        Ok(TopologySample {
            id: 0, // assigned below in deterministic order
            xi: id_xi,
            theta: simp_result.theta_star,
            q_rob: labels.q_rob,
            q_mean: labels.mean,
            q_std: labels.std,
        })
    });

    let total = results.len();
    let mut rows = Vec::new();
    let mut failed = 0usize;
    for (id, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut sample) => {
                sample.id = id;
                let rel = format!("topo_{id:05}.rtod");
                write_topology(&sample.theta, &out_dir.join(&rel))?;
                rows.push(ManifestRow {
                    id,
                    xi: sample.xi,
                    q_rob: sample.q_rob,
                    q_mean: sample.q_mean,
                    q_std: sample.q_std,
                    split: SplitTag::Train,
                    path: rel,
                });
            }
            Err(_) => failed += 1,
        }
    }
    if failed * 20 > total {
        return Err(RtoError::CorpusFailures { failed, total });
    }
    let manifest = CorpusManifest { spec_hash: spec_hash(spec), lambda: cfg.lambda, seed, rows };
    write_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Tags the `k_exclude` lowest-q_rob samples as excluded, then draws `n_test`
/// random test samples from the remainder (ties in the ranking break by id).
pub fn rank_and_split(
    manifest: &CorpusManifest,
    k_exclude: usize,
    n_test: usize,
    seed: u64,
) -> Result<CorpusManifest> {
    if k_exclude + n_test >= manifest.rows.len() {
        return Err(RtoError::Parameter(format!(
            "cannot exclude {k_exclude} and hold out {n_test} from {} samples",
            manifest.rows.len()
        )));
    }
    let mut order: Vec<usize> = (0..manifest.rows.len()).collect();
    order.sort_by(|&a, &b| {
        manifest.rows[a]
            .q_rob
            .total_cmp(&manifest.rows[b].q_rob)
            .then(manifest.rows[a].id.cmp(&manifest.rows[b].id))
    });
    let mut out = manifest.clone();
    for row in &mut out.rows {
        row.split = SplitTag::Train;
    }
    for &i in order.iter().take(k_exclude) {
        out.rows[i].split = SplitTag::Excluded;
    }
    let mut remaining: Vec<usize> = order.iter().skip(k_exclude).copied().collect();
    remaining.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    remaining.shuffle(&mut rng);
    for &i in remaining.iter().take(n_test) {
        out.rows[i].split = SplitTag::Test;
    }
    Ok(out)
}

/// Writes a density field in the RTOD binary layout: magic, version, nx, ny
/// as little-endian u32, then nx·ny little-endian f32 densities row-major
/// from the top-left.
pub fn write_topology(theta: &DensityField, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * theta.values.len());
    buf.extend_from_slice(TOPOLOGY_MAGIC);
    buf.extend_from_slice(&TOPOLOGY_VERSION.to_le_bytes());
    buf.extend_from_slice(&(theta.grid.nx as u32).to_le_bytes());
    buf.extend_from_slice(&(theta.grid.ny as u32).to_le_bytes());
    for &v in &theta.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads an RTOD topology file back into a density field.
pub fn read_topology(path: &Path) -> Result<DensityField> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(RtoError::Format(format!("{}: truncated header", path.display())));
    }
    if &bytes[0..4] != TOPOLOGY_MAGIC {
        return Err(RtoError::Format(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TOPOLOGY_VERSION {
        return Err(RtoError::Format(format!("{}: unsupported version {version}", path.display())));
    }
    let nx = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let ny = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + 4 * nx * ny;
    if bytes.len() != expected {
        return Err(RtoError::Format(format!(
            "{}: expected {expected} bytes for {nx}x{ny}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let grid = GridSpec::new(nx, ny)
        .map_err(|_| RtoError::Format(format!("{}: bad dimensions {nx}x{ny}", path.display())))?;
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DensityField::new(grid, values)
}

/// Renders a density field as a binary PGM (P5) image; solid material is
/// black, so luminance = round(255·(1 − θ)).
pub fn export_pgm(theta: &DensityField, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(
        format!("P5\n{} {}\n255\n", theta.grid.nx, theta.grid.ny).as_bytes(),
    );
    for &v in &theta.values {
        let lum = (255.0 * (1.0 - v)).round().clamp(0.0, 255.0) as u8;
        buf.push(lum);
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Writes the manifest as UTF-8 CSV with a metadata preamble in `#` comments.
pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# spec_hash={}\n", manifest.spec_hash));
    out.push_str(&format!("# lambda={}\n", manifest.lambda));
    out.push_str(&format!("# seed={}\n", manifest.seed));
    out.push_str("id,xi,q_rob,q_mean,q_std,split,path\n");
    for row in &manifest.rows {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{}\n",
            row.id,
            row.xi,
            row.q_rob,
            row.q_mean,
            row.q_std,
            row.split.as_str(),
            row.path
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a manifest written by [`write_manifest`].
pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path)?;
    let mut spec_hash = String::new();
    let mut lambda = 1.0;
    let mut seed = 0u64;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some((k, v)) = rest.split_once('=') {
                match k {
                    "spec_hash" => spec_hash = v.to_string(),
                    "lambda" => {
                        lambda = v.parse().map_err(|_| {
                            RtoError::Format(format!("bad lambda '{v}' in manifest"))
                        })?
                    }
                    "seed" => {
                        seed = v
                            .parse()
                            .map_err(|_| RtoError::Format(format!("bad seed '{v}' in manifest")))?
                    }
                    _ => {}
                }
            }
            continue;
        }
        if !saw_header {
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(RtoError::Format(format!("manifest row has {} fields", fields.len())));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| RtoError::Format(format!("bad number '{s}' in manifest")))
        };
        rows.push(ManifestRow {
            id: fields[0]
                .parse()
                .map_err(|_| RtoError::Format(format!("bad id '{}'", fields[0])))?,
            xi: parse_f(fields[1])?,
            q_rob: parse_f(fields[2])?,
            q_mean: parse_f(fields[3])?,
            q_std: parse_f(fields[4])?,
            split: SplitTag::parse(fields[5])?,
            path: fields[6].to_string(),
        });
    }
    Ok(CorpusManifest { spec_hash, lambda, seed, rows })
}

/// Loads the topologies for every row with the given tag, in row order.
pub fn load_split(
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    tag: SplitTag,
) -> Result<Vec<(ManifestRow, DensityField)>> {
    let mut out = Vec::new();
    for row in manifest.rows_with_tag(tag) {
        let theta = read_topology(&corpus_dir.join(&row.path))?;
        out.push((row.clone(), theta));
    }
    Ok(out)
}

/// Resolves the canonical corpus directory layout under an output root.
pub fn corpus_dir(out_root: &Path) -> PathBuf {
    out_root.join("corpus")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_l_bracket;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("rto-dataset-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn topology_round_trip_and_size() {
        let dir = tmpdir("roundtrip");
        let grid = GridSpec::new(10, 10).unwrap();
        // f32-representable values round-trip bit-exactly
        let values: Vec<f64> = (0..100).map(|i| (i as f32 / 128.0) as f64 + 0.001953125).collect();
        let theta = DensityField::new(grid, values).unwrap();
        let path = dir.join("t.rtod");
        write_topology(&theta, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 16 + 4 * 100);
        let back = read_topology(&path).unwrap();
        assert_eq!(back, theta);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let dir = tmpdir("magic");
        let path = dir.join("bad.rtod");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x02\x00\x00\x00\x02\x00\x00\x00").unwrap();
        assert!(matches!(read_topology(&path), Err(RtoError::Format(_))));
        let short = dir.join("short.rtod");
        fs::write(&short, b"RTOD\x01").unwrap();
        assert!(matches!(read_topology(&short), Err(RtoError::Format(_))));
    }

    #[test]
    fn pgm_luminance_mapping() {
        let dir = tmpdir("pgm");
        let grid = GridSpec::new(2, 2).unwrap();
        let theta = DensityField::new(grid, vec![1.0, 0.001, 0.5, 0.0]).unwrap();
        let path = dir.join("t.pgm");
        export_pgm(&theta, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let pixels = &bytes[bytes.len() - 4..];
        assert_eq!(pixels[0], 0); // solid -> black
        assert_eq!(pixels[1], 255);
        assert_eq!(pixels[2], 128);
        assert_eq!(pixels[3], 255);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tmpdir("manifest");
        let manifest = CorpusManifest {
            spec_hash: "cafebabe".into(),
            lambda: 1.0,
            seed: 7,
            rows: vec![ManifestRow {
                id: 0,
                xi: 1.25,
                q_rob: 3.5,
                q_mean: 3.25,
                q_std: 0.25,
                split: SplitTag::Test,
                path: "topo_00000.rtod".into(),
            }],
        };
        let path = dir.join("manifest.csv");
        write_manifest(&manifest, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.spec_hash, manifest.spec_hash);
        assert_eq!(back.rows, manifest.rows);
        assert_eq!(back.seed, 7);
    }

    #[test]
    fn toy_corpus_generation() {
        let dir = tmpdir("corpus");
        let spec = make_l_bracket(12, 0.4, 1.0).unwrap();
        let cfg = RobustConfig::quadrature(1.0, 3).unwrap();
        let simp = SimpConfig { max_iters: 5, ..SimpConfig::default() };
        let manifest = generate_corpus(&spec, 6, &cfg, &simp, 42, &dir).unwrap();
        assert_eq!(manifest.rows.len(), 6);
        for row in &manifest.rows {
            assert!(row.q_rob >= 0.0);
            assert!(dir.join(&row.path).exists());
        }
        // byte-identical regeneration
        let bytes1 = fs::read(dir.join("manifest.csv")).unwrap();
        let dir2 = tmpdir("corpus2");
        generate_corpus(&spec, 6, &cfg, &simp, 42, &dir2).unwrap();
        let bytes2 = fs::read(dir2.join("manifest.csv")).unwrap();
        assert_eq!(bytes1, bytes2);
        let t1 = fs::read(dir.join("topo_00003.rtod")).unwrap();
        let t2 = fs::read(dir2.join("topo_00003.rtod")).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn rank_and_split_partitions() {
        let rows: Vec<ManifestRow> = (0..20)
            .map(|i| ManifestRow {
                id: i,
                xi: i as f64,
                q_rob: ((i * 7) % 20) as f64,
                q_mean: 0.0,
                q_std: 0.0,
                split: SplitTag::Train,
                path: format!("topo_{i:05}.rtod"),
            })
            .collect();
        let manifest = CorpusManifest { spec_hash: String::new(), lambda: 1.0, seed: 0, rows };
        let split = rank_and_split(&manifest, 3, 5, 1).unwrap();
        assert_eq!(split.rows_with_tag(SplitTag::Excluded).count(), 3);
        assert_eq!(split.rows_with_tag(SplitTag::Test).count(), 5);
        assert_eq!(split.rows_with_tag(SplitTag::Train).count(), 12);

        // excluded = the k smallest q_rob values, verified by full sort
        let mut sorted: Vec<f64> = manifest.rows.iter().map(|r| r.q_rob).collect();
        sorted.sort_by(f64::total_cmp);
        let excluded: Vec<f64> =
            split.rows_with_tag(SplitTag::Excluded).map(|r| r.q_rob).collect();
        for q in excluded {
            assert!(sorted[..3].contains(&q));
        }

        // k = 0, n_test = 0 leaves everything in train
        let all_train = rank_and_split(&manifest, 0, 0, 1).unwrap();
        assert_eq!(all_train.rows_with_tag(SplitTag::Train).count(), 20);

        assert!(rank_and_split(&manifest, 10, 10, 1).is_err());
    }
}
