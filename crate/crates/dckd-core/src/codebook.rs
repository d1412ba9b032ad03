//! Fixed codebook of embedding vectors for the distribution mapping module.
//!
//! The desk-scale codebook ships as a committed fixture: M = 32 centroids of
//! k-means over deepest encoder features of a held-out synthetic image set.
//! A regeneration test pins the fixture to the code that produced it.
//! External codebooks load from the documented one-array JSON schema.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::OnceLock;

use crate::data::make_toy_corpus;
use crate::encoder::{ConvEncoder, FeatureEncoder};
use crate::error::CoreError;
use crate::rng;
use crate::Result;

/// Seed for the held-out synthetic set the desk codebook is trained on;
/// deliberately disjoint from any run seed stream.
pub const DESK_CODEBOOK_SEED: u64 = 0xC0DE;
const DESK_IMAGES: usize = 32;
const DESK_IMAGE_SIZE: usize = 32;
const DESK_M: usize = 32;
const KMEANS_ITERS: usize = 50;

/// M embedding vectors of dimension d, pairwise distinct and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Array2<f64>,
}

impl Codebook {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (m, _) = entries.dim();
        if m == 0 {
            return Err(CoreError::param("codebook", "need at least one entry"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::param("codebook", "entries must be finite"));
        }
        for i in 0..m {
            for j in i + 1..m {
                if entries.row(i) == entries.row(j) {
                    return Err(CoreError::param(
                        "codebook",
                        format!("entries {i} and {j} are identical"),
                    ));
                }
            }
        }
        Ok(Codebook { entries })
    }

    /// Number of categories M.
    pub fn m(&self) -> usize {
        self.entries.dim().0
    }

    /// Embedding dimension d.
    pub fn dim(&self) -> usize {
        self.entries.dim().1
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn entry(&self, i: usize) -> ArrayView1<'_, f64> {
        self.entries.row(i)
    }

    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.entries.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }

    /// Lloyd's k-means with deterministic seeding. Empty clusters are
    /// reseeded to the point currently farthest from its centroid.
    pub fn train_kmeans(points: ArrayView2<'_, f64>, m: usize, seed: u64) -> Result<Codebook> {
        let (n, d) = points.dim();
        if n < m {
            return Err(CoreError::param(
                "kmeans",
                format!("{n} points for {m} clusters"),
            ));
        }
        let mut krng = rng::rng(seed, rng::stream::CODEBOOK, 0);
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut krng);
        let mut centroids = Array2::<f64>::zeros((m, d));
        for (c, &i) in indices.iter().take(m).enumerate() {
            centroids.row_mut(c).assign(&points.row(i));
        }
        let mut assign = vec![0usize; n];
        for _ in 0..KMEANS_ITERS {
            // Assignment step; ties break to the lowest cluster index.
            for (p, a) in assign.iter_mut().enumerate() {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for c in 0..m {
                    let dist: f64 = points
                        .row(p)
                        .iter()
                        .zip(centroids.row(c).iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    if dist < best_d {
                        best_d = dist;
                        best = c;
                    }
                }
                *a = best;
            }
            // Update step.
            let mut sums = Array2::<f64>::zeros((m, d));
            let mut counts = vec![0usize; m];
            for (p, &a) in assign.iter().enumerate() {
                let mut row = sums.row_mut(a);
                row += &points.row(p);
                counts[a] += 1;
            }
            for c in 0..m {
                if counts[c] > 0 {
                    let mut row = centroids.row_mut(c);
                    row.assign(&sums.row(c));
                    row.mapv_inplace(|v| v / counts[c] as f64);
                } else {
                    // Reseed to the globally worst-fit point.
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            let da: f64 = points
                                .row(a)
                                .iter()
                                .zip(centroids.row(assign[a]).iter())
                                .map(|(x, y)| (x - y) * (x - y))
                                .sum();
                            let db: f64 = points
                                .row(b)
                                .iter()
                                .zip(centroids.row(assign[b]).iter())
                                .map(|(x, y)| (x - y) * (x - y))
                                .sum();
                            da.partial_cmp(&db).expect("finite distances")
                        })
                        .expect("non-empty points");
                    centroids.row_mut(c).assign(&points.row(far));
                }
            }
        }
        Codebook::new(centroids)
    }

    /// Regenerate the desk codebook from scratch: encode the held-out
    /// synthetic set with the given encoder and cluster the deepest
    /// features.
    pub fn build_desk(encoder: &ConvEncoder) -> Result<Codebook> {
        let images = make_toy_corpus(DESK_CODEBOOK_SEED, DESK_IMAGES, DESK_IMAGE_SIZE)?;
        let d = encoder.deepest_dim();
        let mut rows: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for img in &images {
            let feats = encoder.deepest_features(img)?;
            let (h, w, dd) = feats.dim();
            debug_assert_eq!(dd, d);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..d {
                        rows.push(feats[[y, x, c]]);
                    }
                    n += 1;
                }
            }
        }
        let points = Array2::from_shape_vec((n, d), rows).expect("row-major feature matrix");
        Codebook::train_kmeans(points.view(), DESK_M, 0)
    }

    /// The shipped fixture codebook (M = 32, d = 32).
    pub fn desk_default() -> &'static Codebook {
        static DESK: OnceLock<Codebook> = OnceLock::new();
        DESK.get_or_init(|| {
            parse_codebook_json(include_str!("../fixtures/codebook_m32_d32.json"), "<fixture>")
                .expect("shipped codebook fixture is valid")
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (m, d) = self.entries.dim();
        let file = CodebookFile {
            format: CODEBOOK_FORMAT.into(),
            m,
            d,
            entries: self
                .entries
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Codebook> {
        let text = std::fs::read_to_string(path)?;
        parse_codebook_json(&text, &path.display().to_string())
    }
}

const CODEBOOK_FORMAT: &str = "dckd-codebook-v1";

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    format: String,
    m: usize,
    d: usize,
    entries: Vec<Vec<f64>>,
}

fn parse_codebook_json(text: &str, origin: &str) -> Result<Codebook> {
    let file: CodebookFile = serde_json::from_str(text).map_err(|e| CoreError::Schema {
        path: origin.to_string(),
        reason: e.to_string(),
    })?;
    if file.format != CODEBOOK_FORMAT {
        return Err(CoreError::Schema {
            path: origin.to_string(),
            reason: format!("unknown format `{}`", file.format),
        });
    }
    if file.entries.len() != file.m || file.entries.iter().any(|r| r.len() != file.d) {
        return Err(CoreError::Schema {
            path: origin.to_string(),
            reason: format!("entries do not match the {}x{} header", file.m, file.d),
        });
    }
    let flat: Vec<f64> = file.entries.into_iter().flatten().collect();
    let arr = Array2::from_shape_vec((file.m, file.d), flat).expect("validated dims");
    Codebook::new(arr)
}
