//! Synthetic catalogs and images for tests, benches and CLI fixtures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::{Catalog, CatalogError, EmbeddingTable, ImageRecord, Split};
use crate::hash::{item_rng, rng_from_seed};
use crate::selection::{PROJECTION, SEX, VIEW};

/// Test-split composition of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskCounts {
    pub task: &'static str,
    pub center: &'static str,
    pub negative_label: &'static str,
    /// Positive labels with their test counts.
    pub positives: Vec<(&'static str, usize)>,
    pub test_negative: usize,
}

impl TaskCounts {
    pub fn test_positive(&self) -> usize {
        self.positives.iter().map(|p| p.1).sum()
    }
}

/// Published test splits of the six tasks.
pub fn table3() -> Vec<TaskCounts> {
    let t = |task, center, negative_label, positives: Vec<(&'static str, usize)>, test_negative| TaskCounts {
        task,
        center,
        negative_label,
        positives,
        test_negative,
    };
    vec![
        t("Edema", "CheXpert", "No Finding", vec![("Edema", 4000)], 4000),
        t("Pneumonia", "CheXpert", "No Finding", vec![("Pneumonia", 2000)], 2000),
        t("Glaucoma", "GF3300", "Normal", vec![("Glaucoma", 303)], 291),
        t("Melanoma", "HAM10000", "Benign", vec![("Melanoma", 500)], 500),
        t("DermaTri", "HAM10000", "Melanocytic", vec![("Basal Cell Carcinoma", 103), ("Melanoma", 103)], 103),
        t("Retinopathy", "BRSET", "Grade 0", vec![("Retinopathy", 556)], 556),
    ]
}

/// Train images generated per positive class and for the negative pool.
/// These are fixture sizes, large enough for the bundled recipes.
pub fn fixture_train_sizes(task: &str) -> (usize, usize) {
    if task == "DermaTri" {
        (461, 411)
    } else {
        (550, 700)
    }
}

fn demographics(rng: &mut ChaCha8Rng) -> BTreeMap<String, String> {
    BTreeMap::from([
        (SEX.to_string(), if rng.random_bool(0.5) { "F" } else { "M" }.to_string()),
        (VIEW.to_string(), if rng.random_bool(0.8) { "Frontal" } else { "Lateral" }.to_string()),
        (PROJECTION.to_string(), if rng.random_bool(0.5) { "AP" } else { "PA" }.to_string()),
    ])
}

fn slug(label: &str) -> String {
    label.to_ascii_lowercase().replace(' ', "_")
}

/// Catalog with the published test counts and a fixture train pool. Uris
/// point to `synth://` locations; no pixels exist.
pub fn table3_catalog(counts: &TaskCounts, seed: u64) -> Catalog {
    let mut rng = item_rng(seed, counts.task);
    let (train_pos, train_neg) = fixture_train_sizes(counts.task);
    let mut records = Vec::new();
    let mut push = |label: &str, split: Split, n: usize, rng: &mut ChaCha8Rng| {
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        for i in 0..n {
            let id = format!("{}-{}-{tag}-{i:05}", slug(counts.task), slug(label));
            records.push(ImageRecord {
                uri: format!("synth://{}/{id}.png", slug(counts.task)),
                id,
                label: label.to_string(),
                attributes: demographics(rng),
                center: counts.center.to_string(),
                split,
                embedding_ref: None,
            });
        }
    };
    for &(label, n) in &counts.positives {
        push(label, Split::Test, n, &mut rng);
        push(label, Split::Train, train_pos, &mut rng);
    }
    push(counts.negative_label, Split::Test, counts.test_negative, &mut rng);
    push(counts.negative_label, Split::Train, train_neg, &mut rng);
    Catalog::new(
        counts.task,
        vec![counts.negative_label.to_string()],
        counts.positives.iter().map(|p| p.0.to_string()).collect(),
        records,
        None,
    )
    .expect("fixture catalog is valid")
}

/// Writes one manifest per task into `dir`; returns their paths.
pub fn write_table3_fixtures(dir: &Path, seed: u64) -> Result<Vec<PathBuf>, CatalogError> {
    fs::create_dir_all(dir).map_err(|e| CatalogError::Io { path: dir.to_path_buf(), source: e })?;
    table3()
        .iter()
        .map(|c| {
            let path = dir.join(format!("{}.manifest", slug(c.task)));
            table3_catalog(c, seed).write_manifest(&path)?;
            Ok(path)
        })
        .collect()
}

fn write_gray(path: &Path, size: u32, level: u8) -> std::io::Result<()> {
    GrayImage::from_pixel(size, size, Luma([level]))
        .save(path)
        .map_err(|e| std::io::Error::other(e.to_string()))
}

fn level(intensity: f64) -> u8 {
    (intensity.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Shared-nuisance simulation: every test query has a train healthy-control
/// partner drawn from the same nuisance level `n ~ U(0, 0.8)`, linked by the
/// `scanner` attribute. Diseased queries add a bump of `0.1`. With
/// `pairs = 1000` this is 2000 images (500 diseased, 500 healthy queries).
pub fn nuisance_dataset(dir: &Path, pairs: usize, seed: u64) -> std::io::Result<Catalog> {
    fs::create_dir_all(dir)?;
    let mut rng = rng_from_seed(seed);
    let mut records = Vec::with_capacity(2 * pairs);
    for i in 0..pairs {
        let n: f64 = rng.random_range(0.0..0.8);
        let diseased = i % 2 == 0;
        let bump = if diseased { 0.1 } else { 0.0 };
        let scanner = format!("s{i:05}");
        let attrs = BTreeMap::from([("scanner".to_string(), scanner.clone())]);
        for (id, label, value, split) in [
            (format!("q{i:05}"), if diseased { "Disease" } else { "Healthy" }, n + bump, Split::Test),
            (format!("r{i:05}"), "Healthy", n, Split::Train),
        ] {
            let path = dir.join(format!("{id}.png"));
            write_gray(&path, 8, level(value))?;
            records.push(ImageRecord {
                id,
                uri: path.display().to_string(),
                label: label.into(),
                attributes: attrs.clone(),
                center: "sim".into(),
                split,
                embedding_ref: None,
            });
        }
    }
    Ok(Catalog::new("Disease", vec!["Healthy".into()], vec!["Disease".into()], records, None).expect("valid fixture"))
}

/// Pneumonia-style catalog with images on disk, demographics, two centers and
/// embeddings, for strategy comparisons. Queries live at center `A`; the
/// healthy pool is split over `A` and `B`. With `uniform_references` every
/// healthy train image has the same intensity, so any intensity-based scorer
/// gives the same decision whatever reference is chosen.
pub fn strategy_fixture(dir: &Path, queries_per_class: usize, pool: usize, uniform_references: bool, seed: u64) -> std::io::Result<Catalog> {
    fs::create_dir_all(dir)?;
    let mut rng = rng_from_seed(seed);
    let mut records = Vec::new();
    let mut table = EmbeddingTable::new(8).expect("positive dim");
    let mut add = |id: String, label: &str, split: Split, center: &str, value: f64, rng: &mut ChaCha8Rng| -> std::io::Result<()> {
        let path = dir.join(format!("{id}.png"));
        write_gray(&path, 8, level(value))?;
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        table.push(id.clone(), &v).expect("matching dim");
        records.push(ImageRecord {
            id,
            uri: path.display().to_string(),
            label: label.into(),
            attributes: demographics(rng),
            center: center.into(),
            split,
            embedding_ref: None,
        });
        Ok(())
    };
    for i in 0..queries_per_class {
        let v = rng.random_range(0.45..0.75);
        add(format!("pos{i:04}"), "Pneumonia", Split::Test, "A", v, &mut rng)?;
        let v = rng.random_range(0.25..0.55);
        add(format!("neg{i:04}"), "No Finding", Split::Test, "A", v, &mut rng)?;
    }
    for i in 0..pool {
        let v = if uniform_references { 0.5 } else { rng.random_range(0.3..0.6) };
        let center = if i % 2 == 0 { "A" } else { "B" };
        add(format!("ref{i:04}"), "No Finding", Split::Train, center, v, &mut rng)?;
    }
    Ok(Catalog::new("Pneumonia", vec!["No Finding".into()], vec!["Pneumonia".into()], records, Some(table)).expect("valid fixture"))
}

/// 50-image end-to-end fixture: 10 diseased and 10 healthy test queries and
/// 30 healthy train references, 16x16 noise images with demographics.
pub fn protocol_fixture(dir: &Path, seed: u64) -> std::io::Result<Catalog> {
    fs::create_dir_all(dir)?;
    let mut rng = rng_from_seed(seed);
    let mut records = Vec::new();
    let mut add = |id: String, label: &str, split: Split, rng: &mut ChaCha8Rng| -> std::io::Result<()> {
        let path = dir.join(format!("{id}.png"));
        GrayImage::from_fn(16, 16, |_, _| Luma([rng.random()]))
            .save(&path)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        records.push(ImageRecord {
            id,
            uri: path.display().to_string(),
            label: label.into(),
            attributes: demographics(rng),
            center: "A".into(),
            split,
            embedding_ref: None,
        });
        Ok(())
    };
    for i in 0..10 {
        add(format!("p{i:02}"), "Edema", Split::Test, &mut rng)?;
        add(format!("h{i:02}"), "No Finding", Split::Test, &mut rng)?;
    }
    for i in 0..30 {
        add(format!("r{i:02}"), "No Finding", Split::Train, &mut rng)?;
    }
    Ok(Catalog::new("Edema", vec!["No Finding".into()], vec!["Edema".into()], records, None).expect("valid fixture"))
}

/// Small random catalog for property tests: 2-40 records over up to three
/// labels, random splits, centers and demographics, embeddings of dim 4.
pub fn random_catalog(seed: u64) -> Catalog {
    let mut rng = rng_from_seed(seed);
    let n = rng.random_range(2..=40);
    let labels = ["No Finding", "Edema", "Other"];
    let mut table = EmbeddingTable::new(4).expect("positive dim");
    let records = (0..n)
        .map(|i| {
            let id = format!("x{i:03}");
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            table.push(id.clone(), &v).expect("matching dim");
            ImageRecord {
                uri: format!("synth://random/{id}.png"),
                id,
                label: labels[rng.random_range(0..labels.len())].into(),
                attributes: demographics(&mut rng),
                center: ["A", "B", "C"][rng.random_range(0..3)].into(),
                split: if rng.random_bool(0.4) { Split::Test } else { Split::Train },
                embedding_ref: None,
            }
        })
        .collect();
    Catalog::new("Edema", vec!["No Finding".into()], vec!["Edema".into(), "Other".into()], records, Some(table)).expect("valid fixture")
}
