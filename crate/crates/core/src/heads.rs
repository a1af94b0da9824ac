//! Per-attribute representation branches, the soft-triplet ranking loss and
//! the head classification loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{soft_plus_ratio, ParamSet, Real, RoiBox, Tape, Tensor, Var};
use crate::synthgen::AttributeSchema;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Side of the square ROI grid sampled from the mid map.
    pub pool_size: usize,
    pub hidden: usize,
    /// Representation width D.
    pub dim: usize,
    /// Concatenate whole-map pooling with the box pooling before fc1.
    pub fusion: bool,
    /// Use `(d+)²` per triplet instead of `d+`.
    pub squared_triplet: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { pool_size: 3, hidden: 64, dim: 32, fusion: false, squared_triplet: false }
    }
}

impl HeadConfig {
    pub fn input_len(&self, mid_channels: usize) -> usize {
        let pooled = self.pool_size * self.pool_size * mid_channels;
        if self.fusion {
            2 * pooled
        } else {
            pooled
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadNames {
    pub fc1_w: String,
    pub fc1_b: String,
    pub fc2_w: String,
    pub fc2_b: String,
    pub cls: String,
}

pub fn head_names(schema: &AttributeSchema, a: usize) -> HeadNames {
    let base = format!("head/{}", schema.attributes[a].name);
    HeadNames {
        fc1_w: format!("{base}/fc1/w"),
        fc1_b: format!("{base}/fc1/b"),
        fc2_w: format!("{base}/fc2/w"),
        fc2_b: format!("{base}/fc2/b"),
        cls: format!("{base}/cls"),
    }
}

/// Every head tensor name, classifiers included.
pub fn all_head_names(schema: &AttributeSchema) -> Vec<String> {
    (0..schema.len())
        .flat_map(|a| {
            let n = head_names(schema, a);
            [n.fc1_w, n.fc1_b, n.fc2_w, n.fc2_b, n.cls]
        })
        .collect()
}

/// He-scaled fc weights, zero biases, small Gaussian classifiers.
pub fn init_heads(schema: &AttributeSchema, config: &HeadConfig, mid_channels: usize, seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |shape: [usize; 2], std: f32| {
        let normal = Normal::new(0.0f32, std).expect("finite std");
        Tensor::from_fn(shape, |_| normal.sample(&mut rng))
    };
    let input = config.input_len(mid_channels);
    let mut params = ParamSet::new();
    for a in 0..schema.len() {
        let n = head_names(schema, a);
        params.insert(n.fc1_w, gaussian([input, config.hidden], (2.0 / input as f32).sqrt()));
        params.insert(n.fc1_b, Tensor::zeros([config.hidden]));
        params.insert(n.fc2_w, gaussian([config.hidden, config.dim], (1.0 / config.hidden as f32).sqrt()));
        params.insert(n.fc2_b, Tensor::zeros([config.dim]));
        params.insert(n.cls, gaussian([config.dim, schema.value_count(a)], 0.01));
    }
    params
}

/// Dropout applied after fc1 during training.
pub struct Dropout<'a, R: Rng> {
    pub keep_probability: f32,
    pub rng: &'a mut R,
}

/// ROI-pool `mid` inside `roi` (plus the whole map under fusion) and run
/// fc1 → relu → dropout → fc2.
pub fn attribute_representation<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    mid: Var,
    roi: &RoiBox,
    a: usize,
    schema: &AttributeSchema,
    config: &HeadConfig,
    params: &ParamSet<T>,
    dropout: Option<Dropout<'_, R>>,
) -> Result<Var> {
    let n = head_names(schema, a);
    let s = config.pool_size;
    let local = tape.crop_and_resize(mid, roi, s, s)?;
    let pooled = if config.fusion {
        let whole = tape.crop_and_resize(mid, &RoiBox::FULL, s, s)?;
        tape.concat(&[local, whole])?
    } else {
        tape.flatten(local)?
    };
    let w1 = tape.param(&n.fc1_w, params.get(&n.fc1_w)?);
    let b1 = tape.param(&n.fc1_b, params.get(&n.fc1_b)?);
    let w2 = tape.param(&n.fc2_w, params.get(&n.fc2_w)?);
    let b2 = tape.param(&n.fc2_b, params.get(&n.fc2_b)?);
    let h = tape.matmul(pooled, w1)?;
    let h = tape.add(h, b1)?;
    let mut h = tape.relu(h)?;
    if let Some(d) = dropout {
        h = tape.dropout(h, d.keep_probability, d.rng)?;
    }
    let out = tape.matmul(h, w2)?;
    tape.add(out, b2)
}

/// Evaluation-mode representation without gradient bookkeeping.
pub fn representation(
    mid: &Tensor<f32>,
    roi: &RoiBox,
    a: usize,
    schema: &AttributeSchema,
    config: &HeadConfig,
    params: &ParamSet<f32>,
) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let m = tape.constant(mid.clone());
    let v = attribute_representation::<f32, ChaCha8Rng>(&mut tape, m, roi, a, schema, config, params, None)?;
    Ok(tape.value(v).clone())
}

/// `(d+, d−)` for one triple with Euclidean (unsquared) distances.
pub fn soft_triplet<T: Real>(anchor: &[T], positive: &[T], negative: &[T]) -> Result<(T, T)> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::Dimension(format!(
            "triplet lengths {}, {}, {} differ",
            anchor.len(),
            positive.len(),
            negative.len()
        )));
    }
    let dist = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
    let d_plus = soft_plus_ratio(dist(anchor, positive), dist(anchor, negative));
    Ok((d_plus, T::one() - d_plus))
}

/// `d+` (or its square) of one triple on the tape.
pub fn triplet_term<T: Real>(tape: &mut Tape<T>, anchor: Var, positive: Var, negative: Var, squared: bool) -> Result<Var> {
    let ap = tape.sub(anchor, positive)?;
    let an = tape.sub(anchor, negative)?;
    let dp = tape.norm(ap)?;
    let dn = tape.norm(an)?;
    let d = tape.soft_triplet(dp, dn)?;
    if squared {
        tape.square(d)
    } else {
        Ok(d)
    }
}

/// One ranking triple for attribute `attribute`, by image index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub attribute: usize,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// `Σ d+` over the triples; `reps[i][a]` is image `i`'s attribute-`a` vector.
pub fn ranking_loss<T: Real>(tape: &mut Tape<T>, triplets: &[Triplet], reps: &[Vec<Var>], squared: bool) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let lookup = |i: usize, a: usize| {
        reps.get(i).and_then(|r| r.get(a)).copied().ok_or_else(|| {
            Error::Usage(format!("no representation for image {i}, attribute {a}"))
        })
    };
    let mut terms = Vec::with_capacity(triplets.len());
    for t in triplets {
        let (x, p, n) = (lookup(t.anchor, t.attribute)?, lookup(t.positive, t.attribute)?, lookup(t.negative, t.attribute)?);
        terms.push(triplet_term(tape, x, p, n, squared)?);
    }
    tape.add_all(&terms)
}

/// `Σ_a CE(rep_a·v_a, label_a)` with the head classifiers `v_a`.
pub fn head_classification_loss<T: Real>(
    tape: &mut Tape<T>,
    reps: &[Var],
    labels: &[usize],
    schema: &AttributeSchema,
    params: &ParamSet<T>,
) -> Result<Var> {
    schema.validate_labels(labels)?;
    if reps.len() != schema.len() {
        return Err(Error::Usage(format!("{} representations for {} attributes", reps.len(), schema.len())));
    }
    let mut terms = Vec::with_capacity(reps.len());
    for (a, (&rep, &label)) in reps.iter().zip(labels).enumerate() {
        let name = head_names(schema, a).cls;
        let v = tape.param(&name, params.get(&name)?);
        let logits = tape.matmul(rep, v)?;
        terms.push(tape.softmax_cross_entropy(logits, label)?);
    }
    tape.add_all(&terms)
}

/// Seeded triplets for one attribute over a labelled set: anchors are drawn
/// uniformly from images that have at least one same-valued partner.
pub fn sample_triplets(labels: &[Vec<usize>], a: usize, count: usize, seed: u64) -> Result<Vec<Triplet>> {
    let mut by_value: Vec<Vec<usize>> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let v = *l.get(a).ok_or_else(|| Error::Argument(format!("attribute {a} out of range")))?;
        if by_value.len() <= v {
            by_value.resize(v + 1, Vec::new());
        }
        by_value[v].push(i);
    }
    let anchors: Vec<usize> = by_value.iter().filter(|g| g.len() >= 2).flatten().copied().collect();
    let fail = |reason: &str| Error::Sampling { attribute: a.to_string(), reason: reason.into() };
    if anchors.is_empty() {
        return Err(fail("no value has two images"));
    }
    if by_value.iter().filter(|g| !g.is_empty()).count() < 2 {
        return Err(fail("only one value present"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = *anchors.choose(&mut rng).expect("non-empty");
        let v = labels[anchor][a];
        let positive = loop {
            let p = *by_value[v].choose(&mut rng).expect("non-empty");
            if p != anchor {
                break p;
            }
        };
        let negative = loop {
            let n = rng.gen_range(0..labels.len());
            if labels[n][a] != v {
                break n;
            }
        };
        out.push(Triplet { attribute: a, anchor, positive, negative });
    }
    Ok(out)
}

/// Up to one triple per anchor per attribute, drawn from within a batch.
pub fn in_batch_triplets<R: Rng>(labels: &[&[usize]], attributes: usize, rng: &mut R) -> Vec<Triplet> {
    let mut out = Vec::new();
    for a in 0..attributes {
        for (anchor, la) in labels.iter().enumerate() {
            let (pos, neg): (Vec<usize>, Vec<usize>) =
                (0..labels.len()).filter(|&j| j != anchor).partition(|&j| labels[j][a] == la[a]);
            if let (Some(&positive), Some(&negative)) = (pos.choose(rng), neg.choose(rng)) {
                out.push(Triplet { attribute: a, anchor, positive, negative });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use rand::Rng;

    use super::*;

    #[test]
    fn fusion_doubles_fc1_input() {
        let schema = AttributeSchema::default();
        let off = HeadConfig::default();
        let on = HeadConfig { fusion: true, ..off };
        assert_eq!(off.input_len(32), 3 * 3 * 32);
        assert_eq!(on.input_len(32), 2 * 3 * 3 * 32);
        let p = init_heads(&schema, &on, 32, 0);
        assert_eq!(p.get("head/top-shape/fc1/w").unwrap().shape(), &[576, 64]);
        let mid = Tensor::from_fn([8, 8, 32], |i| (i % 13) as f32 * 0.1);
        let r = representation(&mid, &RoiBox::FULL, 1, &schema, &on, &p).unwrap();
        assert_eq!(r.shape(), &[32]);
    }

    #[test]
    fn zero_mid_and_bias_gives_zero_vector() {
        let schema = AttributeSchema::default();
        let cfg = HeadConfig::default();
        let p = init_heads(&schema, &cfg, 4, 3);
        let r = representation(&Tensor::zeros([8, 8, 4]), &RoiBox::FULL, 0, &schema, &cfg, &p).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_hand_matmul_on_one_channel() {
        let schema = AttributeSchema::default();
        let cfg = HeadConfig { pool_size: 3, hidden: 9, dim: 9, ..Default::default() };
        let mut p = init_heads(&schema, &cfg, 1, 0);
        let eye = Tensor::from_fn([9, 9], |i| if i / 9 == i % 9 { 1.0 } else { 0.0 });
        let n = head_names(&schema, 0);
        p.insert(n.fc1_w, eye.clone());
        p.insert(n.fc2_w, eye.map(|v| 2.0 * v));
        p.insert(n.fc2_b, Tensor::full([9], 0.5));
        let mid = Tensor::from_fn([3, 3, 1], |i| i as f32 - 4.0);
        let r = representation(&mid, &RoiBox::FULL, 0, &schema, &cfg, &p).unwrap();
        let expect: Vec<f32> = (0..9).map(|i| 2.0 * (i as f32 - 4.0).max(0.0) + 0.5).collect();
        assert_eq!(r.data(), expect.as_slice());
    }

    #[test]
    fn soft_triplet_examples() {
        let a = [1.0f64, 2.0];
        assert_eq!(soft_triplet(&a, &[1.0, 3.0], &[0.0, 2.0]).unwrap(), (0.5, 0.5));
        let ln3 = 3f64.ln();
        let (dp, dn) = soft_triplet(&a, &a, &[1.0 + ln3, 2.0]).unwrap();
        assert!((dp - 0.25).abs() < 1e-15);
        assert!((dn - 0.75).abs() < 1e-15);
        assert!(soft_triplet(&a, &a, &[1.0]).is_err());
    }

    #[test]
    fn ranking_loss_matches_formula_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f64>::new();
        let raw: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| (0..3).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
            .collect();
        let reps: Vec<Vec<Var>> = raw
            .iter()
            .map(|img| img.iter().map(|v| tape.constant(Tensor::new([8], v.clone()).unwrap())).collect())
            .collect();
        let mut triplets = Vec::new();
        for a in 0..3 {
            triplets.push(Triplet { attribute: a, anchor: 0, positive: 1, negative: 2 });
            triplets.push(Triplet { attribute: a, anchor: 3, positive: 2, negative: 1 });
        }
        let loss = ranking_loss(&mut tape, &triplets, &reps, false).unwrap();
        let expect: f64 = triplets
            .iter()
            .map(|t| {
                let r = |i: usize| raw[i][t.attribute].as_slice();
                soft_triplet(r(t.anchor), r(t.positive), r(t.negative)).unwrap().0
            })
            .sum();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);

        let missing = [Triplet { attribute: 0, anchor: 9, positive: 0, negative: 1 }];
        assert!(matches!(ranking_loss(&mut tape, &missing, &reps, false), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_head_classifiers_give_log_counts() {
        let schema = AttributeSchema::default();
        let mut params = init_heads(&schema, &HeadConfig::default(), 2, 0).cast::<f64>();
        for a in 0..schema.len() {
            params.insert(head_names(&schema, a).cls, Tensor::zeros([32, 4]));
        }
        let mut tape = Tape::<f64>::new();
        let reps: Vec<Var> = (0..4).map(|a| tape.constant(Tensor::full([32], a as f64))).collect();
        let loss = head_classification_loss(&mut tape, &reps, &[3, 2, 1, 0], &schema, &params).unwrap();
        assert!((tape.value(loss).item() - 4.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_image_value_forces_pair() {
        let labels = vec![vec![0], vec![1], vec![1], vec![2], vec![2], vec![2]];
        for t in sample_triplets(&labels, 0, 500, 1).unwrap() {
            if labels[t.anchor][0] == 1 {
                assert_eq!([t.anchor.min(t.positive), t.anchor.max(t.positive)], [1, 2]);
            }
            assert_ne!(t.anchor, t.positive);
            assert_eq!(labels[t.anchor][0], labels[t.positive][0]);
            assert_ne!(labels[t.anchor][0], labels[t.negative][0]);
        }
        assert_eq!(sample_triplets(&labels, 0, 50, 8).unwrap(), sample_triplets(&labels, 0, 50, 8).unwrap());
    }

    #[test]
    fn sampling_errors_name_attribute() {
        let single = vec![vec![0, 0], vec![0, 1]];
        match sample_triplets(&single, 0, 3, 0) {
            Err(Error::Sampling { attribute, .. }) => assert_eq!(attribute, "0"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(sample_triplets(&[vec![0], vec![1]], 0, 3, 0).is_err());
    }

    #[test]
    fn in_batch_triplets_respect_labels() {
        let labels: Vec<Vec<usize>> = (0..12).map(|i| vec![i % 3, i % 2]).collect();
        let refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = in_batch_triplets(&refs, 2, &mut rng);
        assert_eq!(t.len(), 24);
        for x in t {
            assert_ne!(x.anchor, x.positive);
            assert_eq!(labels[x.anchor][x.attribute], labels[x.positive][x.attribute]);
            assert_ne!(labels[x.anchor][x.attribute], labels[x.negative][x.attribute]);
        }
    }

    proptest! {
        #[test]
        fn d_plus_in_unit_interval_and_decreasing(
            a in proptest::collection::vec(-3.0f64..3.0, 6),
            p in proptest::collection::vec(-3.0f64..3.0, 6),
            dir in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-3);
            let at = |t: f64| -> Vec<f64> { a.iter().zip(&dir).map(|(x, d)| x + t * d / norm).collect() };
            let mut last = f64::INFINITY;
            for step in 0..10 {
                let (dp, dn) = soft_triplet(&a, &p, &at(0.5 * step as f64 + 0.1)).unwrap();
                prop_assert!(dp > 0.0 && dp < 1.0);
                prop_assert!((dp + dn - 1.0).abs() < 1e-12);
                prop_assert!(dp < last);
                last = dp;
            }
        }

        #[test]
        fn representation_ignores_untouched_cells(
            data in proptest::collection::vec(0.0f32..1.0, 8 * 8 * 2),
            y in 0.0f32..0.6, x in 0.0f32..0.6, h in 0.0f32..0.4, w in 0.0f32..0.4,
        ) {
            let schema = AttributeSchema::default();
            let cfg = HeadConfig::default();
            let params = init_heads(&schema, &cfg, 2, 7);
            let roi = RoiBox { y1: y, x1: x, y2: y + h, x2: x + w };
            let mid = Tensor::new([8, 8, 2], data).unwrap();
            // keep only the cells the bilinear samples touch
            let rows = crate::numerics::kernels::sample_positions::<f32>(roi.y1, roi.y2, 8, 3);
            let cols = crate::numerics::kernels::sample_positions::<f32>(roi.x1, roi.x2, 8, 3);
            let touched = |i: usize, j: usize| {
                rows.iter().any(|s| s.lo == i || s.hi == i) && cols.iter().any(|s| s.lo == j || s.hi == j)
            };
            let masked = Tensor::from_fn([8, 8, 2], |k| {
                let cell = k / 2;
                if touched(cell / 8, cell % 8) { mid.data()[k] } else { 0.0 }
            });
            let a = representation(&mid, &roi, 2, &schema, &cfg, &params).unwrap();
            let b = representation(&masked, &roi, 2, &schema, &cfg, &params).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-6);
        }
    }
}
