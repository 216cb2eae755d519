//! Embedding drift between two models: joint PCA of contextual token
//! vectors, Euclidean token distances, and SVG/CSV figures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use redbert_tensor::Graph;

use crate::encoder::{Batch, Ctx};
use crate::error::{io_err, Error, Result};
use crate::model::Model;
use crate::tokenizer::{basic_tokenize, encode_ids, tokenize_words};

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 100;
const SIGN_EPS: f64 = 1e-12;

/// Eigen-decomposition of a symmetric `n x n` row-major matrix by cyclic
/// Jacobi rotations. Eigenvalues come back in descending order; column `j`
/// of the returned row-major matrix is the eigenvector of value `j`.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != n * n {
        return Err(Error::Data(format!("{} entries for a {n}x{n} matrix", matrix.len())));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src];
        }
    }
    Ok((values, vectors))
}

/// A fitted principal-component projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit-length rows of length `d`; the first nonzero coordinate of
    /// each is positive.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues of the kept components (denominator `n - 1`).
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl Pca {
    pub fn fit(data: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = data.len();
        if n < k {
            return Err(Error::Data(format!("PCA needs at least {k} points, got {n}")));
        }
        let d = data.first().map_or(0, Vec::len);
        if d < k {
            return Err(Error::Data(format!("PCA to {k} components needs dimension at least {k}, got {d}")));
        }
        if let Some(i) = data.iter().position(|r| r.len() != d) {
            return Err(Error::Data(format!("row {i} has {} columns, expected {d}", data[i].len())));
        }
        let mut mean = vec![0.0; d];
        for row in data {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let mut cov = vec![0.0; d * d];
        for row in data {
            let c: Vec<f64> = row.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= denom;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        let (values, vectors) = symmetric_eigen(&cov, d)?;
        let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
        let mut components = Vec::with_capacity(k);
        for j in 0..k {
            let mut c: Vec<f64> = (0..d).map(|i| vectors[i * d + j]).collect();
            if c.iter().find(|x| x.abs() > SIGN_EPS).is_some_and(|&x| x < 0.0) {
                c.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(c);
        }
        let explained_variance: Vec<f64> = values[..k].iter().map(|v| v.max(0.0)).collect();
        let explained_variance_ratio = explained_variance
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect();
        Ok(Self {
            mean,
            components,
            explained_variance,
            explained_variance_ratio,
        })
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row.iter().zip(&self.mean)).map(|(w, (x, m))| w * (x - m)).sum())
            .collect()
    }

    pub fn inverse_transform(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &z) in self.components.iter().zip(coords) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += z * w;
            }
        }
        out
    }
}

/// Fits a `k`-component PCA and projects every row.
pub fn pca_project(data: &[Vec<f64>], k: usize) -> Result<(Vec<Vec<f64>>, Pca)> {
    let pca = Pca::fit(data, k)?;
    let coords = data.iter().map(|r| pca.transform(r)).collect();
    Ok((coords, pca))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Contextual vectors of the words of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectorsInContext {
    pub words: Vec<String>,
    /// Encoder hidden states; a word split into pieces gets the mean of its
    /// piece vectors.
    pub vectors: Vec<Vec<f64>>,
}

impl WordVectorsInContext {
    pub fn index_of(&self, word: &str) -> Result<usize> {
        let key = word.to_lowercase();
        self.words
            .iter()
            .position(|w| *w == key)
            .ok_or_else(|| Error::Data(format!("token {word:?} not found in sentence")))
    }

    /// Full-space distance matrix.
    pub fn distances(&self) -> Vec<Vec<f64>> {
        pairwise(&self.vectors)
    }
}

fn pairwise(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|a| points.iter().map(|b| euclidean(a, b)).collect())
        .collect()
}

/// Runs the encoder (evaluation mode) on `sentence` and pools piece vectors
/// per word. Words truncated away by `max_len` are dropped.
pub fn contextual_vectors(model: &Model, sentence: &str) -> Result<WordVectorsInContext> {
    let words = basic_tokenize(sentence);
    if words.is_empty() {
        return Err(Error::Data("sentence has no tokens".into()));
    }
    let (ids, owner) = tokenize_words(&words, &model.vocab);
    let pair = encode_ids(&ids, None, &model.vocab, model.config.max_len)?;
    let kept = pair.real_len() - 2;
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::eval(&mut rng);
    let batch = Batch::from_pairs([&pair])?;
    let features = model.net.backbone.forward(&mut g, &model.store, &batch, &mut ctx)?;
    let hidden = g.value(features.hidden);
    let width = hidden.last_dim();
    let n_words = owner[..kept].last().map_or(0, |&w| w + 1);
    let mut sums = vec![vec![0.0; width]; n_words];
    let mut counts = vec![0usize; n_words];
    for p in 0..kept {
        let w = owner[p];
        for (s, x) in sums[w].iter_mut().zip(hidden.row(p + 1)) {
            *s += *x as f64;
        }
        counts[w] += 1;
    }
    let vectors = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|x| x / c as f64).collect())
        .collect();
    Ok(WordVectorsInContext {
        words: words[..n_words].to_vec(),
        vectors,
    })
}

/// Euclidean distance between two words of `sentence` in the model's full
/// hidden space.
pub fn token_distance(model: &Model, sentence: &str, token_i: &str, token_j: &str) -> Result<f64> {
    let ctx = contextual_vectors(model, sentence)?;
    let i = ctx.index_of(token_i)?;
    let j = ctx.index_of(token_j)?;
    Ok(euclidean(&ctx.vectors[i], &ctx.vectors[j]))
}

/// One model's share of a [`ProjectionReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelProjection {
    pub name: String,
    pub coords: Vec<[f64; 2]>,
    /// Pairwise distances in the full hidden space.
    pub distances_hidden: Vec<Vec<f64>>,
    /// Pairwise distances between the 2-D projections.
    pub distances_2d: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionReport {
    pub sentence: String,
    pub words: Vec<String>,
    pub dim_hidden: usize,
    pub models: Vec<ModelProjection>,
    pub explained_variance_ratio: [f64; 2],
    pub pca: Pca,
}

impl ProjectionReport {
    /// Joint 2-D PCA over the word vectors of every model so the point
    /// clouds share one frame.
    pub fn build(sentence: &str, runs: &[(String, WordVectorsInContext)]) -> Result<Self> {
        let Some((_, first)) = runs.first() else {
            return Err(Error::Data("projection needs at least one model".into()));
        };
        let dim = first.vectors.first().map_or(0, Vec::len);
        for (name, r) in runs {
            if r.words != first.words {
                return Err(Error::Data(format!("model {name} tokenized the sentence differently")));
            }
            if r.vectors.iter().any(|v| v.len() != dim) {
                return Err(Error::Config(format!("model {name} has hidden size different from {dim}")));
            }
        }
        let all: Vec<Vec<f64>> = runs.iter().flat_map(|(_, r)| r.vectors.iter().cloned()).collect();
        let (coords, pca) = pca_project(&all, 2)?;
        let n = first.words.len();
        let models = runs
            .iter()
            .enumerate()
            .map(|(m, (name, r))| {
                let pts: Vec<[f64; 2]> = coords[m * n..(m + 1) * n].iter().map(|c| [c[0], c[1]]).collect();
                let flat: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
                ModelProjection {
                    name: name.clone(),
                    coords: pts,
                    distances_hidden: r.distances(),
                    distances_2d: pairwise(&flat),
                }
            })
            .collect();
        Ok(Self {
            sentence: sentence.to_string(),
            words: first.words.clone(),
            dim_hidden: dim,
            models,
            explained_variance_ratio: [pca.explained_variance_ratio[0], pca.explained_variance_ratio[1]],
            pca,
        })
    }

    /// Point coordinates, header `token,model,x,y,dim_hidden`.
    pub fn points_csv(&self) -> String {
        let mut out = String::from("token,model,x,y,dim_hidden\n");
        for m in &self.models {
            for (w, c) in self.words.iter().zip(&m.coords) {
                let _ = writeln!(out, "{},{},{},{},{}", csv(w), csv(&m.name), c[0], c[1], self.dim_hidden);
            }
        }
        out
    }

    /// Pairwise distances in both spaces, labeled by space.
    pub fn distances_csv(&self) -> String {
        let mut out = String::from("model,space,token_a,token_b,distance\n");
        for m in &self.models {
            for (space, table) in [("hidden", &m.distances_hidden), ("pca2d", &m.distances_2d)] {
                for i in 0..self.words.len() {
                    for j in i + 1..self.words.len() {
                        let _ = writeln!(
                            out,
                            "{},{space},{},{},{}",
                            csv(&m.name),
                            csv(&self.words[i]),
                            csv(&self.words[j]),
                            table[i][j]
                        );
                    }
                }
            }
        }
        out
    }

    pub fn svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 480.0;
        const PAD: f64 = 60.0;
        const COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
        let pts = self.models.iter().flat_map(|m| m.coords.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in pts {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let span = |a: f64, b: f64| if b - a > 0.0 { b - a } else { 1.0 };
        let (sx, sy) = ((W - 2.0 * PAD) / span(x0, x1), (H - 2.0 * PAD) / span(y0, y1));
        let px = |x: f64| PAD + (x - x0) * sx;
        let py = |y: f64| H - PAD - (y - y0) * sy;

        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
            W / 2.0,
            xml(&self.sentence)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">PC1 ({:.1}%)   PC2 ({:.1}%)</text>"#,
            W / 2.0,
            H - 16.0,
            100.0 * self.explained_variance_ratio[0],
            100.0 * self.explained_variance_ratio[1]
        );
        for (m, proj) in self.models.iter().enumerate() {
            let color = COLORS[m % COLORS.len()];
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
                W - PAD - 100.0,
                44.0 + 16.0 * m as f64,
                xml(&proj.name)
            );
            let _ = writeln!(s, r#"<g fill="{color}" class="model-{m}">"#);
            for (w, c) in self.words.iter().zip(&proj.coords) {
                let (x, y) = (px(c[0]), py(c[1]));
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4"/>"#);
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
                    x + 6.0,
                    y - 6.0,
                    xml(w)
                );
            }
            let _ = writeln!(s, "</g>");
        }
        s.push_str("</svg>\n");
        s
    }
}

fn csv(s: &str) -> String {
    crate::trainkit::csv_field(s)
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Paths written by [`emit_figure`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FigureFiles {
    pub svg: PathBuf,
    pub points: PathBuf,
    pub distances: PathBuf,
}

/// Writes `path` (SVG) plus `<stem>.csv` (points) and
/// `<stem>_distances.csv` beside it.
pub fn emit_figure(report: &ProjectionReport, path: &Path) -> Result<FigureFiles> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("projection");
    let files = FigureFiles {
        svg: path.to_path_buf(),
        points: path.with_extension("csv"),
        distances: path.with_file_name(format!("{stem}_distances.csv")),
    };
    std::fs::write(&files.svg, report.svg()).map_err(io_err(&files.svg))?;
    std::fs::write(&files.points, report.points_csv()).map_err(io_err(&files.points))?;
    std::fs::write(&files.distances, report.distances_csv()).map_err(io_err(&files.distances))?;
    Ok(files)
}

/// Contextual vectors from each model, then the joint projection.
pub fn project(sentence: &str, models: &[(&str, &Model)]) -> Result<ProjectionReport> {
    let runs = models
        .iter()
        .map(|(name, m)| Ok((name.to_string(), contextual_vectors(m, sentence)?)))
        .collect::<Result<Vec<_>>>()?;
    ProjectionReport::build(sentence, &runs)
}
