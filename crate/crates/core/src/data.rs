//! Dataset ingestion and synthesis: a versioned TOML manifest listing
//! delimited-text recordings, a channel-group selector (force / imu /
//! all), a deterministic synthetic gait generator, and a converter from
//! class-per-directory archives into the canonical layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sequence::{SampleMeta, SequenceSample};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelSelection {
    #[default]
    All,
    Force,
    Imu,
}

impl std::str::FromStr for ChannelSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ChannelSelection::All),
            "force" => Ok(ChannelSelection::Force),
            "imu" => Ok(ChannelSelection::Imu),
            other => Err(Error::config(format!(
                "unknown channel selection '{other}' (expected all, force, or imu)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSchema {
    pub name: String,
    pub unit: String,
    /// Sensor group used by channel selection; "force" or "imu".
    #[serde(default)]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub name: String,
    pub num_classes: usize,
    pub classes: Vec<String>,
    pub sample_rate_hz: f64,
    #[serde(default)]
    pub select: ChannelSelection,
    pub channels: Vec<ChannelSchema>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<DatasetManifest> {
        let manifest: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::config(format!("manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::config(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.classes.len() != self.num_classes {
            return Err(Error::config(format!(
                "num_classes is {} but {} class names listed",
                self.num_classes,
                self.classes.len()
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::config("manifest lists no channels".to_string()));
        }
        for r in &self.records {
            if r.label >= self.num_classes {
                return Err(Error::config(format!(
                    "record {} has label {} but num_classes is {}",
                    r.path, r.label, self.num_classes
                )));
            }
        }
        let selected = self.selected_columns();
        if selected.is_empty() {
            return Err(Error::config(format!(
                "channel selection {:?} matches no channels",
                self.select
            )));
        }
        Ok(())
    }

    /// Column indices kept after channel-group selection.
    pub fn selected_columns(&self) -> Vec<usize> {
        let want = match self.select {
            ChannelSelection::All => return (0..self.channels.len()).collect(),
            ChannelSelection::Force => "force",
            ChannelSelection::Imu => "imu",
        };
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.group.as_deref() == Some(want))
            .map(|(i, _)| i)
            .collect()
    }
}

fn parse_sample_file(
    path: &Path,
    expected: &[ChannelSchema],
    keep: &[usize],
) -> Result<Matrix> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    if names.len() != expected.len() {
        return Err(Error::Data(format!(
            "{}: expected {} channels, found {}",
            path.display(),
            expected.len(),
            names.len()
        )));
    }
    for (found, want) in names.iter().zip(expected) {
        if *found != want.name {
            return Err(Error::Data(format!(
                "{}: channel '{found}' where schema says '{}'",
                path.display(),
                want.name
            )));
        }
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != expected.len() {
            return Err(Error::Data(format!(
                "{} line {}: expected {} columns, found {}",
                path.display(),
                lineno + 2,
                expected.len(),
                fields.len()
            )));
        }
        for &c in keep {
            let v: f64 = fields[c].parse().map_err(|_| {
                Error::Data(format!(
                    "{} line {}: '{}' is not a number",
                    path.display(),
                    lineno + 2,
                    fields[c]
                ))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    Ok(Matrix::from_vec(rows, keep.len(), values))
}

/// Load every record of a manifest, in manifest order. Record paths are
/// resolved relative to `data_root` when given, else to the manifest's
/// own directory. Files are read concurrently.
pub fn load_dataset(
    manifest_path: &Path,
    data_root: Option<&Path>,
) -> Result<(DatasetManifest, Vec<SequenceSample>)> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest = DatasetManifest::parse(&text)?;
    let root: PathBuf = match data_root {
        Some(r) => r.to_path_buf(),
        None => manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let keep = manifest.selected_columns();

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<Result<Matrix>>> =
        (0..manifest.records.len()).map(|_| None).collect();
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= manifest.records.len() {
                    break;
                }
                let path = root.join(&manifest.records[i].path);
                let loaded = parse_sample_file(&path, &manifest.channels, &keep);
                slots.lock().unwrap()[i] = Some(loaded);
            });
        }
    });

    let mut samples = Vec::with_capacity(manifest.records.len());
    for (record, slot) in manifest.records.iter().zip(results) {
        let data = slot.expect("loader thread skipped a record")?;
        if let Some(expected_len) = record.length {
            if data.rows() != expected_len {
                return Err(Error::Data(format!(
                    "{}: manifest says {} timesteps, file has {}",
                    record.path,
                    expected_len,
                    data.rows()
                )));
            }
        }
        samples.push(SequenceSample {
            data,
            label: record.label,
            meta: SampleMeta {
                speed: record.speed.clone(),
                direction: record.direction.clone(),
                sensors: None,
            },
        });
    }
    Ok((manifest, samples))
}

/// Per-class signal recipe for the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignal {
    /// Cycles per timestep of the fundamental.
    pub base_frequency: f64,
    pub amplitude: f64,
    /// Relative weights of the fundamental and its overtones.
    pub harmonics: Vec<f64>,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub classes: Vec<ClassSignal>,
    pub min_len: usize,
    pub max_len: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.num_classes {
            return Err(Error::config(format!(
                "{} classes but {} signal recipes",
                self.num_classes,
                self.classes.len()
            )));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::config(format!(
                "length range [{}, {}] invalid (min >= 2, max >= min)",
                self.min_len, self.max_len
            )));
        }
        if self.channels == 0 || self.samples_per_class == 0 {
            return Err(Error::config(
                "channels and samples_per_class must be >= 1".to_string(),
            ));
        }
        if self.classes.iter().any(|c| c.noise_std < 0.0) {
            return Err(Error::config("noise_std must be >= 0".to_string()));
        }
        Ok(())
    }

    /// Six gait-like classes over three channels, distinguished by
    /// fundamental frequency and overtone mix, with enough noise that
    /// small labeled subsets undertrain.
    pub fn six_class(samples_per_class: usize, seed: u64) -> SynthConfig {
        let recipes = [
            (0.050, vec![1.0, 0.3, 0.1]),
            (0.075, vec![1.0, 0.1, 0.4]),
            (0.105, vec![0.8, 0.6, 0.1]),
            (0.060, vec![0.3, 1.0, 0.2]),
            (0.090, vec![1.0, 0.5, 0.5]),
            (0.130, vec![0.6, 0.2, 0.9]),
        ];
        SynthConfig {
            num_classes: 6,
            channels: 3,
            classes: recipes
                .into_iter()
                .map(|(f, harmonics)| ClassSignal {
                    base_frequency: f,
                    amplitude: 1.0,
                    harmonics,
                    noise_std: 0.35,
                })
                .collect(),
            min_len: 40,
            max_len: 120,
            samples_per_class,
            seed,
        }
    }
}

/// Sums of class-specific sinusoids plus Gaussian noise, lengths uniform
/// in [min_len, max_len]. A pure function of the config: identical
/// configs give bitwise-identical datasets. Samples are interleaved by
/// class (labels 0, 1, ..., C-1, 0, 1, ...).
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<SequenceSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class);
    for _ in 0..cfg.samples_per_class {
        for (label, sig) in cfg.classes.iter().enumerate() {
            let t_len = rng.gen_range(cfg.min_len..=cfg.max_len);
            // per-sample phase and slight frequency jitter keep samples
            // within a class from being time shifts of one another
            let freq = sig.base_frequency * rng.gen_range(0.95..1.05);
            let phases: Vec<Vec<f64>> = (0..cfg.channels)
                .map(|_| {
                    (0..sig.harmonics.len())
                        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                        .collect()
                })
                .collect();
            let mut values = Vec::with_capacity(t_len * cfg.channels);
            for t in 0..t_len {
                for d in 0..cfg.channels {
                    let mut v = 0.0;
                    for (k, &w) in sig.harmonics.iter().enumerate() {
                        let omega = std::f64::consts::TAU * freq * (k + 1) as f64;
                        v += w * (omega * t as f64 + phases[d][k]).sin();
                    }
                    v = sig.amplitude * v + sig.noise_std * normal.sample(&mut rng);
                    values.push(v);
                }
            }
            samples.push(SequenceSample::new(
                Matrix::from_vec(t_len, cfg.channels, values),
                label,
            ));
        }
    }
    Ok(samples)
}

/// Write samples plus a manifest into `dir` in the canonical layout.
pub fn write_dataset(
    dir: &Path,
    name: &str,
    classes: &[String],
    channels: &[ChannelSchema],
    sample_rate_hz: f64,
    samples: &[SequenceSample],
) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("samples"))?;
    let mut records = Vec::with_capacity(samples.len());
    let header: Vec<&str> = channels.iter().map(|c| c.name.as_str()).collect();
    for (i, s) in samples.iter().enumerate() {
        if s.channels() != channels.len() {
            return Err(Error::Data(format!(
                "sample {i} has {} channels, schema has {}",
                s.channels(),
                channels.len()
            )));
        }
        let rel = format!("samples/{i:05}.csv");
        let mut text = String::new();
        text.push_str(&header.join(","));
        text.push('\n');
        for t in 0..s.len() {
            let row: Vec<String> = s.data.row(t).iter().map(|v| format!("{v:.17e}")).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(dir.join(&rel), text)?;
        records.push(SampleRecord {
            path: rel,
            label: s.label,
            length: Some(s.len()),
            speed: s.meta.speed.clone(),
            direction: s.meta.direction.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        name: name.to_string(),
        num_classes: classes.len(),
        classes: classes.to_vec(),
        sample_rate_hz,
        select: ChannelSelection::All,
        channels: channels.to_vec(),
        records,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::config(format!("manifest serialization failed: {e}")))?;
    fs::write(&path, text)?;
    Ok(path)
}

/// Numbered channel schema for data without meaningful channel names.
pub fn generic_channels(d: usize, group: Option<&str>) -> Vec<ChannelSchema> {
    (0..d)
        .map(|i| ChannelSchema {
            name: format!("ch{i}"),
            unit: "raw".to_string(),
            group: group.map(str::to_string),
        })
        .collect()
}

/// Convert a class-per-directory archive of headerless delimited files
/// (comma, semicolon, tab, or whitespace separated) into the canonical
/// layout. Class directories are taken in sorted order as labels 0..C.
pub fn convert_archive(input: &Path, output: &Path, name: &str) -> Result<PathBuf> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no class directories",
            input.display()
        )));
    }
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    let mut channels: Option<usize> = None;
    for (label, dir) in class_dirs.iter().enumerate() {
        classes.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("class{label}")),
        );
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let data = parse_raw_file(&file)?;
            match channels {
                None => channels = Some(data.cols()),
                Some(d) if d != data.cols() => {
                    return Err(Error::Data(format!(
                        "{}: {} channels, earlier files had {d}",
                        file.display(),
                        data.cols()
                    )));
                }
                _ => {}
            }
            samples.push(SequenceSample::new(data, label));
        }
    }
    let d = channels.ok_or_else(|| Error::Data("archive has no data files".to_string()))?;
    write_dataset(
        output,
        name,
        &classes,
        &generic_channels(d, None),
        0.0,
        &samples,
    )
}

fn parse_raw_file(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut values = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains(',') {
            line.split(',').collect()
        } else if line.contains(';') {
            line.split(';').collect()
        } else {
            line.split_whitespace().collect()
        };
        let parsed: std::result::Result<Vec<f64>, _> =
            fields.iter().map(|f| f.trim().parse::<f64>()).collect();
        let row = parsed.map_err(|_| {
            Error::Data(format!(
                "{} line {}: non-numeric field",
                path.display(),
                lineno + 1
            ))
        })?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::Data(format!(
                    "{} line {}: {} columns, expected {c}",
                    path.display(),
                    lineno + 1,
                    row.len()
                )));
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?;
    Ok(Matrix::from_vec(rows, cols, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qcat_style_channels() -> Vec<ChannelSchema> {
        // 4 force sensors x 3 axes, then a 10-channel IMU block
        let mut channels = Vec::new();
        for s in 0..4 {
            for axis in ["x", "y", "z"] {
                channels.push(ChannelSchema {
                    name: format!("f{s}_{axis}"),
                    unit: "N".to_string(),
                    group: Some("force".to_string()),
                });
            }
        }
        for i in 0..10 {
            channels.push(ChannelSchema {
                name: format!("imu{i}"),
                unit: "raw".to_string(),
                group: Some("imu".to_string()),
            });
        }
        channels
    }

    fn write_tiny_dataset(dir: &Path, select: ChannelSelection) -> PathBuf {
        let channels = qcat_style_channels();
        let samples: Vec<SequenceSample> = (0..4)
            .map(|i| {
                SequenceSample::new(Matrix::from_vec(3 + i, 22, vec![0.5; (3 + i) * 22]), i % 2)
            })
            .collect();
        let path = write_dataset(
            dir,
            "tiny",
            &["a".to_string(), "b".to_string()],
            &channels,
            100.0,
            &samples,
        )
        .unwrap();
        if select != ChannelSelection::All {
            let text = fs::read_to_string(&path).unwrap();
            let mut m = DatasetManifest::parse(&text).unwrap();
            m.select = select;
            fs::write(&path, toml::to_string_pretty(&m).unwrap()).unwrap();
        }
        path
    }

    #[test]
    fn force_selection_gives_12_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_dataset(dir.path(), ChannelSelection::Force);
        let (_, samples) = load_dataset(&path, None).unwrap();
        assert_eq!(samples.len(), 4);
        assert!(samples.iter().all(|s| s.channels() == 12));
    }

    #[test]
    fn imu_selection_gives_10_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_dataset(dir.path(), ChannelSelection::Imu);
        let (_, samples) = load_dataset(&path, None).unwrap();
        assert!(samples.iter().all(|s| s.channels() == 10));
    }

    #[test]
    fn roundtrip_preserves_lengths_order_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_dataset(dir.path(), ChannelSelection::All);
        let (manifest, samples) = load_dataset(&path, None).unwrap();
        assert_eq!(manifest.records.len(), 4);
        let lengths: Vec<usize> = samples.iter().map(|s| s.len()).collect();
        assert_eq!(lengths, vec![3, 4, 5, 6]);
        assert_eq!(samples[0].data.row(0)[0], 0.5);
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 1, 0, 1]);
    }

    #[test]
    fn schema_mismatch_names_file_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_dataset(dir.path(), ChannelSelection::All);
        // corrupt one sample file: drop a column from every row
        let bad = dir.path().join("samples/00001.csv");
        let text = fs::read_to_string(&bad).unwrap();
        let trimmed: Vec<String> = text
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect();
        fs::write(&bad, trimmed.join("\n")).unwrap();
        let err = load_dataset(&path, None).unwrap_err().to_string();
        assert!(err.contains("00001.csv"), "{err}");
        assert!(err.contains("22") && err.contains("21"), "{err}");
    }

    #[test]
    fn missing_file_error_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_dataset(dir.path(), ChannelSelection::All);
        fs::remove_file(dir.path().join("samples/00002.csv")).unwrap();
        let err = load_dataset(&path, None).unwrap_err().to_string();
        assert!(err.contains("00002.csv"), "{err}");
    }

    #[test]
    fn manifest_rejects_bad_label_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_dataset(dir.path(), ChannelSelection::All);
        let text = fs::read_to_string(&path).unwrap();
        let mut m = DatasetManifest::parse(&text).unwrap();
        m.records[0].label = 9;
        assert!(m.validate().is_err());
        m.records[0].label = 0;
        m.version = 2;
        assert!(m.validate().is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let cfg = SynthConfig::six_class(5, 42);
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        for s in &a {
            assert!((40..=120).contains(&s.len()));
            assert_eq!(s.channels(), 3);
        }
        // all six classes, interleaved
        let labels: Vec<usize> = a.iter().take(6).map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 1, 2, 3, 4, 5]);
        let other = generate_synthetic(&SynthConfig::six_class(5, 43)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn synth_config_validation() {
        let mut cfg = SynthConfig::six_class(5, 0);
        cfg.min_len = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::six_class(5, 0);
        cfg.classes[2].noise_std = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::six_class(5, 0);
        cfg.classes.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn convert_archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("raw");
        for (class, sep) in [("gravel", "\t"), ("sand", ",")] {
            let cdir = input.join(class);
            fs::create_dir_all(&cdir).unwrap();
            for i in 0..3 {
                let rows: Vec<String> = (0..4 + i)
                    .map(|t| {
                        [t as f64, t as f64 * 0.5]
                            .map(|v| v.to_string())
                            .join(sep)
                    })
                    .collect();
                fs::write(cdir.join(format!("rec{i}.txt")), rows.join("\n")).unwrap();
            }
        }
        let out = dir.path().join("canonical");
        let manifest = convert_archive(&input, &out, "converted").unwrap();
        let (m, samples) = load_dataset(&manifest, None).unwrap();
        assert_eq!(m.classes, vec!["gravel".to_string(), "sand".to_string()]);
        assert_eq!(samples.len(), 6);
        assert!(samples.iter().all(|s| s.channels() == 2));
        assert_eq!(samples[1].len(), 5);
        approx::assert_abs_diff_eq!(samples[0].data.row(2)[1], 1.0);
    }
}
