//! Gallery indexing, exact Top-K retrieval and Top-K accuracy evaluation.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sidecar_path, Model};
use crate::numerics::{checkpoint, ParamSet, Tensor};
use crate::synthgen::{manipulations_available, AttributeSchema, LabeledImage};

pub const DISTANCE: &str = "squared_euclidean";

/// Immutable snapshot of a represented gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    pub version: String,
    pub ids: Vec<String>,
    pub labels: Vec<Vec<usize>>,
    /// `[N, A·D]` concatenated attribute representations.
    pub reps: Tensor<f32>,
    /// Per manipulated attribute, `[N, r]` composed vectors.
    pub projected: Vec<Tensor<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexMeta {
    version: String,
    distance: String,
    attributes: Vec<String>,
    ids: Vec<String>,
    labels: Vec<Vec<usize>>,
}

fn rows(t: &Tensor<f32>) -> usize {
    t.shape()[0]
}

fn row(t: &Tensor<f32>, i: usize) -> &[f32] {
    let w = t.shape()[1];
    &t.data()[i * w..(i + 1) * w]
}

pub fn index_gallery(model: &Model, gallery: &[&LabeledImage]) -> Result<GalleryIndex> {
    let a_count = model.schema.len();
    let rep_width = a_count * model.config.heads.dim;
    let mut reps = Vec::with_capacity(gallery.len() * rep_width);
    let mut projected: Vec<Vec<f32>> = vec![Vec::new(); a_count];
    let mut r = None;
    for img in gallery {
        model.schema.validate_labels(&img.labels)?;
        let image_reps = model.representations(&img.pixels)?;
        for rep in &image_reps {
            reps.extend_from_slice(rep.data());
        }
        for (a, f) in model.gallery_vectors(&image_reps)?.into_iter().enumerate() {
            r = Some(f.len());
            projected[a].extend_from_slice(f.data());
        }
    }
    let r = match r {
        Some(r) => r,
        None => model.compose(&vec![Tensor::zeros([model.config.heads.dim]); a_count], None, 0)?.len(),
    };
    let n = gallery.len();
    Ok(GalleryIndex {
        version: model.version(),
        ids: gallery.iter().map(|g| g.id.clone()).collect(),
        labels: gallery.iter().map(|g| g.labels.clone()).collect(),
        reps: Tensor::new([n, rep_width], reps)?,
        projected: projected.into_iter().map(|p| Tensor::new([n, r], p)).collect::<Result<_>>()?,
    })
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Writes `path` (tensors) and `path.json` (ids, labels, version).
    pub fn save(&self, path: &Path, schema: &AttributeSchema) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tensors = ParamSet::new();
        tensors.insert("index/reps", self.reps.clone());
        for (a, p) in self.projected.iter().enumerate() {
            tensors.insert(format!("index/proj/{}", schema.attributes[a].name), p.clone());
        }
        checkpoint::save(path, &tensors)?;
        let meta = IndexMeta {
            version: self.version.clone(),
            distance: DISTANCE.into(),
            attributes: schema.attributes.iter().map(|a| a.name.clone()).collect(),
            ids: self.ids.clone(),
            labels: self.labels.clone(),
        };
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string(&meta)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: IndexMeta = serde_json::from_str(&text)?;
        if meta.distance != DISTANCE {
            return Err(Error::Checkpoint(format!("unsupported distance '{}'", meta.distance)));
        }
        let tensors = checkpoint::load(path)?;
        let mut names = vec!["index/reps".to_string()];
        names.extend(meta.attributes.iter().map(|a| format!("index/proj/{a}")));
        tensors.require(&names)?;
        let reps = tensors.get(&names[0])?.clone();
        let projected: Vec<Tensor<f32>> = names[1..].iter().map(|n| tensors.get(n).cloned()).collect::<Result<_>>()?;
        let n = meta.ids.len();
        if meta.labels.len() != n || rows(&reps) != n || projected.iter().any(|p| rows(p) != n) {
            return Err(Error::Checkpoint("index tensors disagree with the id list".into()));
        }
        Ok(Self { version: meta.version, ids: meta.ids, labels: meta.labels, reps, projected })
    }

    /// Errors unless the index was built from `model`.
    pub fn check_version(&self, model: &Model) -> Result<()> {
        let v = model.version();
        if v != self.version {
            return Err(Error::VersionMismatch { checkpoint: v, index: self.version.clone() });
        }
        Ok(())
    }

    /// Gallery positions ordered by squared distance to `f` in attribute
    /// `a`'s projected space, ties broken by id; at most `k`.
    pub fn rank(&self, f: &Tensor<f32>, a: usize, k: usize) -> Result<Vec<(usize, f32)>> {
        let proj = self
            .projected
            .get(a)
            .ok_or_else(|| Error::Argument(format!("attribute index {a} out of range")))?;
        if rows(proj) > 0 {
            f.expect_shape(&[proj.shape()[1]])?;
        }
        let mut scored: Vec<(usize, f32)> = (0..self.len())
            .map(|i| {
                let d = row(proj, i).iter().zip(f.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
                (i, d)
            })
            .collect();
        scored.sort_by(|x, y| {
            x.1.partial_cmp(&y.1).unwrap_or(Ordering::Equal).then_with(|| self.ids[x.0].cmp(&self.ids[y.0]))
        });
        scored.truncate(k);
        Ok(scored)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub distance: f32,
    pub labels: Vec<usize>,
    pub hit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub results: Vec<RankedItem>,
    pub target_labels: Vec<usize>,
    pub manipulated_attribute: usize,
}

/// Validates `(a, v)` against the schema and the query's current labels.
pub fn check_manipulation(schema: &AttributeSchema, labels: &[usize], a: usize, v: usize) -> Result<()> {
    if a >= schema.len() {
        return Err(Error::Argument(format!("attribute index {a} out of range")));
    }
    if v >= schema.value_count(a) {
        return Err(Error::Argument(format!(
            "value index {v} out of range for attribute '{}'",
            schema.attributes[a].name
        )));
    }
    if labels.get(a) == Some(&v) {
        return Err(Error::Argument(format!(
            "attribute '{}' already has value '{}'",
            schema.attributes[a].name, schema.attributes[a].values[v]
        )));
    }
    Ok(())
}

/// Top-K gallery images for "the query with attribute `a` set to `v`".
pub fn query(model: &Model, index: &GalleryIndex, image: &LabeledImage, a: usize, v: usize, k: usize) -> Result<QueryResult> {
    model.schema.validate_labels(&image.labels)?;
    check_manipulation(&model.schema, &image.labels, a, v)?;
    let reps = model.representations(&image.pixels)?;
    query_with_reps(model, index, &reps, &image.labels, a, v, k)
}

pub fn query_with_reps(
    model: &Model,
    index: &GalleryIndex,
    reps: &[Tensor<f32>],
    labels: &[usize],
    a: usize,
    v: usize,
    k: usize,
) -> Result<QueryResult> {
    check_manipulation(&model.schema, labels, a, v)?;
    let mut target = labels.to_vec();
    target[a] = v;
    let fq = model.query_vector(reps, a, v)?;
    let results = index
        .rank(&fq, a, k)?
        .into_iter()
        .map(|(i, d)| RankedItem {
            id: index.ids[i].clone(),
            distance: d,
            labels: index.labels[i].clone(),
            hit: index.labels[i] == target,
        })
        .collect();
    Ok(QueryResult { results, target_labels: target, manipulated_attribute: a })
}

/// One evaluated (query, manipulation) pair and its ranked gallery ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: String,
    pub attribute: usize,
    pub value: usize,
    pub target: Vec<usize>,
    pub ranked: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attributes: Vec<String>,
    pub ks: Vec<usize>,
    /// `accuracy[k][a]`.
    pub accuracy: Vec<Vec<f64>>,
    /// Mean over attributes per K.
    pub average: Vec<f64>,
    /// Evaluated manipulations per attribute.
    pub counts: Vec<usize>,
    pub queries: usize,
    #[serde(skip)]
    pub records: Vec<QueryRecord>,
}

/// Top-K accuracy over every manipulation available in the gallery.
pub fn evaluate(model: &Model, index: &GalleryIndex, queries: &[&LabeledImage], ks: &[usize]) -> Result<EvalReport> {
    index.check_version(model)?;
    let reps: Vec<Vec<Tensor<f32>>> = queries.iter().map(|q| model.representations(&q.pixels)).collect::<Result<_>>()?;
    evaluate_with_reps(model, index, queries, &reps, ks)
}

pub fn evaluate_with_reps(
    model: &Model,
    index: &GalleryIndex,
    queries: &[&LabeledImage],
    reps: &[Vec<Tensor<f32>>],
    ks: &[usize],
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::Argument("at least one K is required".into()));
    }
    let max_k = *ks.iter().max().expect("non-empty");
    let mut records = Vec::new();
    for (q, q_reps) in queries.iter().zip(reps) {
        for (a, v) in manipulations_available(&q.labels, &index.labels) {
            let res = query_with_reps(model, index, q_reps, &q.labels, a, v, max_k)?;
            records.push(QueryRecord {
                query: q.id.clone(),
                attribute: a,
                value: v,
                target: res.target_labels,
                ranked: res.results.into_iter().map(|r| r.id).collect(),
            });
        }
    }
    Ok(summarize(&model.schema, index, ks, queries.len(), records))
}

/// Accuracy tables from stored ranked lists.
pub fn summarize(schema: &AttributeSchema, index: &GalleryIndex, ks: &[usize], queries: usize, records: Vec<QueryRecord>) -> EvalReport {
    let labels_of: BTreeMap<&str, &Vec<usize>> = index.ids.iter().map(String::as_str).zip(&index.labels).collect();
    let a_count = schema.len();
    let mut counts = vec![0usize; a_count];
    let mut hits = vec![vec![0usize; a_count]; ks.len()];
    for r in &records {
        counts[r.attribute] += 1;
        let first = r.ranked.iter().position(|id| labels_of.get(id.as_str()) == Some(&&r.target));
        for (ki, &k) in ks.iter().enumerate() {
            if first.is_some_and(|p| p < k) {
                hits[ki][r.attribute] += 1;
            }
        }
    }
    let accuracy: Vec<Vec<f64>> = hits
        .iter()
        .map(|h| h.iter().zip(&counts).map(|(&x, &c)| if c > 0 { x as f64 / c as f64 } else { 0.0 }).collect())
        .collect();
    let evaluated: Vec<usize> = (0..a_count).filter(|&a| counts[a] > 0).collect();
    let average = accuracy
        .iter()
        .map(|row| {
            if evaluated.is_empty() {
                0.0
            } else {
                evaluated.iter().map(|&a| row[a]).sum::<f64>() / evaluated.len() as f64
            }
        })
        .collect();
    EvalReport {
        attributes: schema.attributes.iter().map(|a| a.name.clone()).collect(),
        ks: ks.to_vec(),
        accuracy,
        average,
        counts,
        queries,
        records,
    }
}

impl EvalReport {
    /// `k,<attr>...,avg` with one row per K.
    pub fn to_csv(&self) -> String {
        let mut out = format!("k,{},avg\n", self.attributes.join(","));
        for (ki, k) in self.ks.iter().enumerate() {
            out.push_str(&k.to_string());
            for v in &self.accuracy[ki] {
                out.push_str(&format!(",{v:.4}"));
            }
            out.push_str(&format!(",{:.4}\n", self.average[ki]));
        }
        out
    }

    pub fn average_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.average[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_of(points: &[(&str, [f32; 2], Vec<usize>)]) -> GalleryIndex {
        let n = points.len();
        let flat: Vec<f32> = points.iter().flat_map(|p| p.1).collect();
        GalleryIndex {
            version: "v".into(),
            ids: points.iter().map(|p| p.0.to_string()).collect(),
            labels: points.iter().map(|p| p.2.clone()).collect(),
            reps: Tensor::new([n, 2], flat.clone()).unwrap(),
            projected: vec![Tensor::new([n, 2], flat).unwrap()],
        }
    }

    #[test]
    fn rank_orders_by_distance_then_id() {
        let idx = index_of(&[
            ("c", [1.0, 0.0], vec![0]),
            ("a", [0.0, 1.0], vec![0]),
            ("b", [3.0, 0.0], vec![0]),
            ("d", [0.0, 0.0], vec![0]),
        ]);
        let f = Tensor::new([2], vec![0.0, 0.0]).unwrap();
        let ranked: Vec<_> = idx.rank(&f, 0, 10).unwrap().into_iter().map(|(i, _)| idx.ids[i].as_str()).collect();
        assert_eq!(ranked, ["d", "a", "c", "b"]);
        assert!(idx.rank(&f, 0, 0).unwrap().is_empty());
        assert_eq!(idx.rank(&f, 0, 2).unwrap().len(), 2);
    }

    #[test]
    fn summarize_counts_only_full_matches() {
        let idx = index_of(&[("g0", [0.0, 0.0], vec![1, 0]), ("g1", [0.0, 0.0], vec![1, 1])]);
        let schema = {
            let mut s = AttributeSchema::default();
            s.attributes.truncate(2);
            s
        };
        let rec = |ranked: &[&str]| QueryRecord {
            query: "q".into(),
            attribute: 0,
            value: 1,
            target: vec![1, 0],
            ranked: ranked.iter().map(|s| s.to_string()).collect(),
        };
        // g1 has the manipulated value but differs elsewhere: a miss
        let r = summarize(&schema, &idx, &[1, 2], 1, vec![rec(&["g1", "g0"])]);
        assert_eq!(r.accuracy[0][0], 0.0);
        assert_eq!(r.accuracy[1][0], 1.0);
        assert_eq!(r.average, vec![0.0, 1.0]);
        assert_eq!(r.to_csv(), "k,body-color,top-shape,avg\n1,0.0000,0.0000,0.0000\n2,1.0000,0.0000,1.0000\n");
    }

    #[test]
    fn manipulation_checks() {
        let schema = AttributeSchema::default();
        assert!(check_manipulation(&schema, &[0, 0, 0, 0], 1, 2).is_ok());
        assert!(check_manipulation(&schema, &[0, 2, 0, 0], 1, 2).is_err());
        assert!(check_manipulation(&schema, &[0, 0, 0, 0], 4, 0).is_err());
        assert!(check_manipulation(&schema, &[0, 0, 0, 0], 0, 4).is_err());
    }
}
