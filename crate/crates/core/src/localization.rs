//! Multi-attribute GAP classifier and attribute activation maps.
//!
//! The classifier scores `gap(last)·w_a` per attribute. An activation map
//! for attribute `a` weights the final feature channels by the column of
//! `w_a` belonging to the most confident class; thresholding it at 20% of
//! its maximum and boxing the largest 4-connected region gives the region
//! the attribute head pools from.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use crate::numerics::RoiBox;

use crate::error::{Error, Result};
use crate::numerics::{crop_and_resize, ParamSet, Real, Tape, Tensor, Var};
use crate::synthgen::AttributeSchema;

/// Fraction of the map maximum a cell must exceed to be segmented.
pub const THRESHOLD_FRACTION: f32 = 0.2;

pub fn classifier_name(schema: &AttributeSchema, a: usize) -> String {
    format!("cls/{}", schema.attributes[a].name)
}

pub fn classifier_names(schema: &AttributeSchema) -> Vec<String> {
    (0..schema.len()).map(|a| classifier_name(schema, a)).collect()
}

/// One `[K, values(a)]` weight matrix per attribute, small Gaussian init.
pub fn init_classifier(schema: &AttributeSchema, channels: usize, seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.01).expect("finite std");
    (0..schema.len())
        .map(|a| {
            let w = Tensor::from_fn([channels, schema.value_count(a)], |_| normal.sample(&mut rng));
            (classifier_name(schema, a), w)
        })
        .collect()
}

/// `Σ_a CE(gap(last)·w_a, label_a)` on the tape.
pub fn classification_loss<T: Real>(
    tape: &mut Tape<T>,
    last: Var,
    labels: &[usize],
    schema: &AttributeSchema,
    params: &ParamSet<T>,
) -> Result<Var> {
    schema.validate_labels(labels)?;
    let pooled = tape.gap(last)?;
    let mut terms = Vec::with_capacity(schema.len());
    for (a, &label) in labels.iter().enumerate() {
        let name = classifier_name(schema, a);
        let w = tape.param(&name, params.get(&name)?);
        let logits = tape.matmul(pooled, w)?;
        terms.push(tape.softmax_cross_entropy(logits, label)?);
    }
    tape.add_all(&terms)
}

/// Class scores `gap(last)·w_a` for every attribute.
pub fn predict<T: Real>(last: &Tensor<T>, schema: &AttributeSchema, params: &ParamSet<T>) -> Result<Vec<Vec<T>>> {
    let pooled = crate::numerics::gap(last)?;
    (0..schema.len())
        .map(|a| {
            let w = params.get(&classifier_name(schema, a))?;
            w.expect_shape(&[pooled.len(), schema.value_count(a)])?;
            Ok(row_times_matrix(pooled.data(), w))
        })
        .collect()
}

fn row_times_matrix<T: Real>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let cols = w.shape()[1];
    let mut out = vec![T::zero(); cols];
    for (k, &xk) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w.data()[k * cols..(k + 1) * cols]) {
            *o = *o + xk * wv;
        }
    }
    out
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeActivationMap {
    pub attribute: usize,
    pub class: usize,
    /// `h×w` heatmap over the final feature map.
    pub heatmap: Tensor<f32>,
}

/// Heatmap `Σ_k w[k, c]·last_k` for a given class column.
pub fn activation_map(last: &Tensor<f32>, weights: &Tensor<f32>, class: usize) -> Result<Tensor<f32>> {
    last.expect_rank(3)?;
    let (h, w, k) = (last.shape()[0], last.shape()[1], last.shape()[2]);
    weights.expect_rank(2)?;
    if weights.shape()[0] != k || class >= weights.shape()[1] {
        return Err(Error::Dimension(format!(
            "weights {:?} do not match {k} channels / class {class}",
            weights.shape()
        )));
    }
    let cols = weights.shape()[1];
    let column: Vec<f32> = (0..k).map(|ch| weights.data()[ch * cols + class]).collect();
    let data = last
        .data()
        .chunks_exact(k)
        .map(|cell| cell.iter().zip(&column).map(|(&v, &wv)| v * wv).sum())
        .collect();
    Tensor::new([h, w], data)
}

/// Activation map for the class the classifier is most confident in.
pub fn compute_aam(
    last: &Tensor<f32>,
    schema: &AttributeSchema,
    params: &ParamSet<f32>,
    a: usize,
) -> Result<AttributeActivationMap> {
    if a >= schema.len() {
        return Err(Error::Argument(format!("attribute index {a} out of range")));
    }
    let w = params.get(&classifier_name(schema, a))?;
    let pooled = crate::numerics::gap(last)?;
    w.expect_shape(&[pooled.len(), schema.value_count(a)])?;
    let class = argmax(&row_times_matrix(pooled.data(), w));
    Ok(AttributeActivationMap { attribute: a, class, heatmap: activation_map(last, w, class)? })
}

/// Cells above the threshold, as a row-major mask.
pub fn segment(heatmap: &Tensor<f32>) -> Vec<bool> {
    let max = heatmap.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let cut = THRESHOLD_FRACTION * max;
    heatmap.data().iter().map(|&v| max > 0.0 && v > cut).collect()
}

/// Labels 4-connected components of `mask` (`h×w`) in row-major order of
/// their first cell. Returns per-cell labels (`usize::MAX` for background)
/// and component sizes.
pub fn label_components(mask: &[bool], h: usize, w: usize) -> (Vec<usize>, Vec<usize>) {
    let mut labels = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(cell) = queue.pop_front() {
            size += 1;
            let (y, x) = (cell / w, cell % w);
            let mut visit = |n: usize| {
                if mask[n] && labels[n] == usize::MAX {
                    labels[n] = id;
                    queue.push_back(n);
                }
            };
            if y > 0 {
                visit(cell - w);
            }
            if y + 1 < h {
                visit(cell + w);
            }
            if x > 0 {
                visit(cell - 1);
            }
            if x + 1 < w {
                visit(cell + 1);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Cells of the component `threshold_bbox` selects, row-major mask.
pub fn selected_component(heatmap: &Tensor<f32>) -> Option<Vec<bool>> {
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let mask = segment(heatmap);
    let (labels, sizes) = label_components(&mask, h, w);
    // first maximum wins, i.e. the component whose first cell comes first
    let best = (0..sizes.len()).fold(None, |best: Option<usize>, id| match best {
        Some(b) if sizes[b] >= sizes[id] => Some(b),
        _ => Some(id),
    })?;
    Some(labels.iter().map(|&l| l == best).collect())
}

/// Tight normalized box around the largest segmented region, or the full
/// image when the map has no positive maximum.
pub fn threshold_bbox(aam: &AttributeActivationMap) -> RoiBox {
    heatmap_bbox(&aam.heatmap)
}

pub fn heatmap_bbox(heatmap: &Tensor<f32>) -> RoiBox {
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let Some(component) = selected_component(heatmap) else {
        return RoiBox::FULL;
    };
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for (cell, _) in component.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (cell / w, cell % w);
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let norm = |v: usize, extent: usize| if extent > 1 { v as f32 / (extent - 1) as f32 } else { 0.0 };
    RoiBox { y1: norm(y0, h), x1: norm(x0, w), y2: norm(y1, h), x2: norm(x1, w) }
}

/// Boxes for every attribute of one image.
pub fn attribute_boxes(last: &Tensor<f32>, schema: &AttributeSchema, params: &ParamSet<f32>) -> Result<Vec<RoiBox>> {
    (0..schema.len())
        .map(|a| compute_aam(last, schema, params, a).map(|m| threshold_bbox(&m)))
        .collect()
}

/// Heatmap rendered as 8-bit grayscale at `height×width`, upsampled
/// bilinearly; negative values clip to black, the maximum maps to white.
pub fn heatmap_image(heatmap: &Tensor<f32>, height: usize, width: usize) -> Result<image::GrayImage> {
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let map = heatmap.clone().reshape([h, w, 1])?;
    let up = crop_and_resize(&map, &RoiBox::FULL, height, width)?;
    let max = heatmap.data().iter().copied().fold(0.0f32, f32::max);
    let bytes = up
        .data()
        .iter()
        .map(|&v| if max > 0.0 { ((v.max(0.0) / max) * 255.0).round().min(255.0) as u8 } else { 0 })
        .collect();
    image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Dimension("heatmap image size".into()))
}

/// JSON record describing one activation map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AamRecord {
    pub image: String,
    pub attribute: String,
    pub class: String,
    #[serde(rename = "box")]
    pub roi: [f32; 4],
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn aam(h: usize, w: usize, data: Vec<f32>) -> AttributeActivationMap {
        AttributeActivationMap { attribute: 0, class: 0, heatmap: Tensor::new([h, w], data).unwrap() }
    }

    #[test]
    fn single_cell_box() {
        let mut data = vec![0.0; 64];
        data[2 * 8 + 3] = 1.0;
        let b = threshold_bbox(&aam(8, 8, data));
        assert_eq!(b, RoiBox { y1: 2.0 / 7.0, x1: 3.0 / 7.0, y2: 2.0 / 7.0, x2: 3.0 / 7.0 });
    }

    #[test]
    fn uniform_map_is_full_box() {
        assert_eq!(threshold_bbox(&aam(8, 8, vec![0.3; 64])), RoiBox::FULL);
    }

    #[test]
    fn non_positive_max_is_full_box() {
        assert_eq!(threshold_bbox(&aam(8, 8, vec![0.0; 64])), RoiBox::FULL);
        assert_eq!(threshold_bbox(&aam(4, 4, vec![-1.0; 16])), RoiBox::FULL);
    }

    #[test]
    fn larger_component_wins() {
        // 3 cells in the top-left, 5 in the bottom-right
        let mut data = vec![0.0; 64];
        for c in [(0, 0), (0, 1), (1, 0)] {
            data[c.0 * 8 + c.1] = 1.0;
        }
        for c in [(5, 5), (5, 6), (6, 5), (6, 6), (7, 6)] {
            data[c.0 * 8 + c.1] = 0.5;
        }
        let b = threshold_bbox(&aam(8, 8, data));
        assert_eq!(b, RoiBox { y1: 5.0 / 7.0, x1: 5.0 / 7.0, y2: 1.0, x2: 6.0 / 7.0 });
    }

    #[test]
    fn tie_goes_to_first_component() {
        let mut data = vec![0.0; 16];
        data[0] = 1.0;
        data[15] = 1.0;
        let b = threshold_bbox(&aam(4, 4, data));
        assert_eq!(b, RoiBox { y1: 0.0, x1: 0.0, y2: 0.0, x2: 0.0 });
    }

    #[test]
    fn threshold_is_strict() {
        let mut data = vec![0.2; 16];
        data[5] = 1.0;
        let b = threshold_bbox(&aam(4, 4, data));
        assert_eq!(b, RoiBox { y1: 1.0 / 3.0, x1: 1.0 / 3.0, y2: 1.0 / 3.0, x2: 1.0 / 3.0 });
    }

    #[test]
    fn aam_identity_and_zero_column() {
        let last = Tensor::from_fn([3, 3, 1], |i| i as f32);
        let w = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(activation_map(&last, &w, 0).unwrap().data(), last.data());
        assert!(activation_map(&last, &w, 1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aam_two_channel_combination() {
        let m1: Vec<f32> = (0..9).map(|i| i as f32 * 0.5).collect();
        let m2: Vec<f32> = (0..9).map(|i| (i as f32).sin()).collect();
        let last = Tensor::from_fn([3, 3, 2], |i| if i % 2 == 0 { m1[i / 2] } else { m2[i / 2] });
        let w = Tensor::new([2, 1], vec![2.0, -1.0]).unwrap();
        let map = activation_map(&last, &w, 0).unwrap();
        for i in 0..9 {
            assert!((map.data()[i] - (2.0 * m1[i] - m2[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn compute_aam_picks_confident_class() {
        let schema = AttributeSchema::default();
        let mut params = ParamSet::new();
        for a in 0..schema.len() {
            let mut w = Tensor::zeros([2, 4]);
            w.data_mut()[4 + 3] = 1.0; // channel 1 votes for class 3
            params.insert(classifier_name(&schema, a), w);
        }
        let last = Tensor::from_fn([2, 2, 2], |i| if i % 2 == 1 { 1.0 } else { 0.0 });
        let m = compute_aam(&last, &schema, &params, 2).unwrap();
        assert_eq!((m.attribute, m.class), (2, 3));
        assert_eq!(m.heatmap.data(), &[1.0; 4]);
    }

    #[test]
    fn zero_classifier_loss_is_sum_of_log_counts() {
        let schema = AttributeSchema::default();
        let params: ParamSet<f64> = classifier_names(&schema)
            .into_iter()
            .map(|n| (n, Tensor::zeros([5, 4])))
            .collect();
        let mut tape = Tape::<f64>::new();
        let last = tape.constant(Tensor::from_fn([2, 2, 5], |i| i as f64));
        let loss = classification_loss(&mut tape, last, &[0, 1, 2, 3], &schema, &params).unwrap();
        let expect = 4.0 * 4f64.ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn heatmap_image_matches_size() {
        let img = heatmap_image(&Tensor::from_fn([8, 8], |i| i as f32), 64, 48).unwrap();
        assert_eq!(img.dimensions(), (48, 64));
        assert_eq!(img.get_pixel(47, 63).0[0], 255);
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
    }

    fn flood_fill_oracle(mask: &[bool], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
        // recursive-style stack fill, independent of label_components
        let mut seen = vec![false; h * w];
        let mut best: Option<(usize, (usize, usize, usize, usize))> = None;
        for s in 0..h * w {
            if !mask[s] || seen[s] {
                continue;
            }
            let mut stack = vec![s];
            seen[s] = true;
            let mut cells = Vec::new();
            while let Some(c) = stack.pop() {
                cells.push(c);
                let (y, x) = ((c / w) as i64, (c % w) as i64);
                for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if mask[n] && !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
            let bb = cells.iter().fold((usize::MAX, 0, usize::MAX, 0), |b, &c| {
                (b.0.min(c / w), b.1.max(c / w), b.2.min(c % w), b.3.max(c % w))
            });
            if best.map_or(true, |(n, _)| cells.len() > n) {
                best = Some((cells.len(), bb));
            }
        }
        best.map(|(_, bb)| bb)
    }

    #[test]
    fn matches_flood_fill_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0f32..1.0).powi(3)).collect();
            let map = Tensor::new([8, 8], data).unwrap();
            let b = heatmap_bbox(&map);
            let expect = match flood_fill_oracle(&segment(&map), 8, 8) {
                Some((y0, y1, x0, x1)) => RoiBox {
                    y1: y0 as f32 / 7.0,
                    x1: x0 as f32 / 7.0,
                    y2: y1 as f32 / 7.0,
                    x2: x1 as f32 / 7.0,
                },
                None => RoiBox::FULL,
            };
            assert_eq!(b, expect);
        }
    }

    proptest! {
        #[test]
        fn positive_scaling_keeps_box(data in proptest::collection::vec(-1.0f32..1.0, 64), s in 0.01f32..100.0) {
            let a = Tensor::new([8, 8], data.clone()).unwrap();
            let b = Tensor::new([8, 8], data.iter().map(|v| v * s).collect()).unwrap();
            prop_assert_eq!(segment(&a), segment(&b));
            prop_assert_eq!(heatmap_bbox(&a), heatmap_bbox(&b));
        }

        #[test]
        fn box_is_tight_around_component(data in proptest::collection::vec(-1.0f32..1.0, 64)) {
            let map = Tensor::new([8, 8], data).unwrap();
            if let Some(comp) = selected_component(&map) {
                let b = heatmap_bbox(&map);
                let cells: Vec<(usize, usize)> = comp.iter().enumerate().filter(|(_, &m)| m).map(|(c, _)| (c / 8, c % 8)).collect();
                let inside = |y: usize, x: usize, bb: &RoiBox| {
                    let (fy, fx) = (y as f32 / 7.0, x as f32 / 7.0);
                    fy >= bb.y1 && fy <= bb.y2 && fx >= bb.x1 && fx <= bb.x2
                };
                prop_assert!(cells.iter().all(|&(y, x)| inside(y, x, &b)));
                // each edge touches a component cell
                prop_assert!(cells.iter().any(|&(y, _)| y as f32 / 7.0 == b.y1));
                prop_assert!(cells.iter().any(|&(y, _)| y as f32 / 7.0 == b.y2));
                prop_assert!(cells.iter().any(|&(_, x)| x as f32 / 7.0 == b.x1));
                prop_assert!(cells.iter().any(|&(_, x)| x as f32 / 7.0 == b.x2));
            }
        }

        #[test]
        fn aam_is_linear_in_column(
            last in proptest::collection::vec(0.0f32..2.0, 3 * 3 * 4),
            w1 in proptest::collection::vec(-1.0f32..1.0, 4),
            w2 in proptest::collection::vec(-1.0f32..1.0, 4),
        ) {
            let last = Tensor::new([3, 3, 4], last).unwrap();
            let a = activation_map(&last, &Tensor::new([4, 1], w1.clone()).unwrap(), 0).unwrap();
            let b = activation_map(&last, &Tensor::new([4, 1], w2.clone()).unwrap(), 0).unwrap();
            let sum: Vec<f32> = w1.iter().zip(&w2).map(|(x, y)| x + y).collect();
            let c = activation_map(&last, &Tensor::new([4, 1], sum).unwrap(), 0).unwrap();
            for i in 0..9 {
                prop_assert!((c.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-5);
            }
        }
    }
}
