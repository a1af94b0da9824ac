//! The attribute memory block: one prototype row per (attribute, value).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::synthgen::AttributeSchema;

pub const MEMORY: &str = "memory/M";

/// Row `schema.row_offset(a) + v` holds the prototype for value `v` of `a`.
pub fn row_of(schema: &AttributeSchema, a: usize, v: usize) -> usize {
    schema.row_offset(a) + v
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowEntry {
    pub attribute: String,
    pub value: String,
    pub row: usize,
}

/// The (attribute, value) → row mapping, serialized next to the checkpoint.
pub fn row_index(schema: &AttributeSchema) -> Vec<RowEntry> {
    schema
        .attributes
        .iter()
        .enumerate()
        .flat_map(|(a, attr)| {
            attr.values.iter().enumerate().map(move |(v, value)| RowEntry {
                attribute: attr.name.clone(),
                value: value.clone(),
                row: row_of(schema, a, v),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBlock {
    pub matrix: Tensor<f32>,
    pub trainable: bool,
}

impl MemoryBlock {
    pub fn freeze(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn unfreeze(mut self) -> Self {
        self.trainable = true;
        self
    }

    pub fn row(&self, row: usize) -> Result<&[f32]> {
        let d = self.matrix.shape()[1];
        if row >= self.matrix.shape()[0] {
            return Err(Error::Index { index: row, len: self.matrix.shape()[0] });
        }
        Ok(&self.matrix.data()[row * d..(row + 1) * d])
    }
}

/// Per-value means of `reps[i][a]` over every image `i`.
///
/// `reps[i]` holds image `i`'s A representation vectors; `labels[i]` its
/// label vector.
pub fn build_memory(schema: &AttributeSchema, reps: &[Vec<Tensor<f32>>], labels: &[Vec<usize>]) -> Result<MemoryBlock> {
    if reps.len() != labels.len() {
        return Err(Error::Dimension(format!("{} representation sets for {} labels", reps.len(), labels.len())));
    }
    let dim = reps
        .first()
        .and_then(|r| r.first())
        .map(|t| t.len())
        .ok_or_else(|| Error::MissingPairs(missing_pairs(schema, &vec![0; schema.total_values()])))?;
    let rows = schema.total_values();
    let mut sums = vec![0.0f64; rows * dim];
    let mut counts = vec![0usize; rows];
    for (img, l) in reps.iter().zip(labels) {
        schema.validate_labels(l)?;
        if img.len() != schema.len() {
            return Err(Error::Dimension(format!("{} representations for {} attributes", img.len(), schema.len())));
        }
        for (a, rep) in img.iter().enumerate() {
            rep.expect_shape(&[dim])?;
            let r = row_of(schema, a, l[a]);
            counts[r] += 1;
            for (s, &v) in sums[r * dim..(r + 1) * dim].iter_mut().zip(rep.data()) {
                *s += v as f64;
            }
        }
    }
    let missing = missing_pairs(schema, &counts);
    if !missing.is_empty() {
        return Err(Error::MissingPairs(missing));
    }
    let data = sums
        .iter()
        .enumerate()
        .map(|(i, s)| (s / counts[i / dim] as f64) as f32)
        .collect();
    Ok(MemoryBlock { matrix: Tensor::new([rows, dim], data)?, trainable: false })
}

fn missing_pairs(schema: &AttributeSchema, counts: &[usize]) -> Vec<(String, String)> {
    row_index(schema)
        .into_iter()
        .filter(|e| counts[e.row] == 0)
        .map(|e| (e.attribute, e.value))
        .collect()
}

/// One-hot manipulation indicator `t` for `(a, v)`.
pub fn indicator(schema: &AttributeSchema, a: usize, v: usize) -> Result<Tensor<f32>> {
    if a >= schema.len() || v >= schema.value_count(a) {
        return Err(Error::Argument(format!("no value {v} for attribute {a}")));
    }
    let mut t = Tensor::zeros([schema.total_values()]);
    t.data_mut()[row_of(schema, a, v)] = 1.0;
    Ok(t)
}

/// `g = t·M`.
pub fn retrieve(memory: &MemoryBlock, t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (rows, d) = (memory.matrix.shape()[0], memory.matrix.shape()[1]);
    t.expect_shape(&[rows])?;
    let mut g = vec![0.0f32; d];
    for (r, &w) in t.data().iter().enumerate() {
        if w != 0.0 {
            for (o, &m) in g.iter_mut().zip(&memory.matrix.data()[r * d..(r + 1) * d]) {
                *o += w * m;
            }
        }
    }
    Tensor::new([d], g)
}

/// `g = t·M` on the tape, with `M` already registered (as a parameter when
/// trainable, as a constant otherwise).
pub fn retrieve_on_tape<T: Real>(tape: &mut Tape<T>, memory: Var, t: &Tensor<T>) -> Result<Var> {
    let rows = tape.value(memory).shape()[0];
    t.expect_shape(&[rows])?;
    let tv = tape.constant(t.clone());
    tape.matmul(tv, memory)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_schema() -> AttributeSchema {
        let mut s = AttributeSchema::default();
        s.attributes.truncate(2);
        for a in &mut s.attributes {
            a.values.truncate(2);
        }
        s
    }

    fn v(x: &[f32]) -> Tensor<f32> {
        Tensor::new([x.len()], x.to_vec()).unwrap()
    }

    #[test]
    fn rows_are_means_in_schema_order() {
        let schema = small_schema();
        let labels = vec![vec![0, 1], vec![1, 1], vec![0, 0], vec![0, 1]];
        let reps = vec![
            vec![v(&[1.0, 0.0, 0.0, 0.0]), v(&[9.0, 9.0, 9.0, 9.0])],
            vec![v(&[5.0, 5.0, 5.0, 5.0]), v(&[3.0, 3.0, 3.0, 3.0])],
            vec![v(&[2.0, 4.0, 6.0, 8.0]), v(&[7.0, 7.0, 7.0, 7.0])],
            vec![v(&[3.0, 2.0, 0.0, 1.0]), v(&[0.0, 0.0, 0.0, 0.0])],
        ];
        let m = build_memory(&schema, &reps, &labels).unwrap();
        assert_eq!(m.matrix.shape(), &[4, 4]);
        assert_eq!(m.row(0).unwrap(), &[2.0, 2.0, 2.0, 3.0]);
        assert_eq!(m.row(1).unwrap(), &[5.0; 4]);
        assert_eq!(m.row(2).unwrap(), &[7.0; 4]);
        assert_eq!(m.row(3).unwrap(), &[4.0; 4]);
        let idx = row_index(&schema);
        assert_eq!(idx[2], RowEntry { attribute: schema.attributes[1].name.clone(), value: schema.attributes[1].values[0].clone(), row: 2 });
    }

    #[test]
    fn missing_pairs_are_listed() {
        let schema = small_schema();
        let reps = vec![vec![v(&[1.0]), v(&[2.0])]];
        match build_memory(&schema, &reps, &[vec![0, 1]]) {
            Err(Error::MissingPairs(p)) => {
                let names: Vec<_> = p.iter().map(|(a, v)| format!("{a}={v}")).collect();
                assert_eq!(names.len(), 2);
                assert!(names[0].starts_with(&schema.attributes[0].name));
                assert!(names[0].ends_with(&schema.attributes[0].values[1]));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn retrieve_examples() {
        let schema = small_schema();
        let m = MemoryBlock { matrix: Tensor::from_fn([4, 3], |i| i as f32), trainable: false };
        let g = retrieve(&m, &indicator(&schema, 1, 0).unwrap()).unwrap();
        assert_eq!(g.data(), m.row(2).unwrap());
        assert!(retrieve(&m, &Tensor::zeros([4])).unwrap().data().iter().all(|&x| x == 0.0));
        let half = Tensor::new([4], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert_eq!(retrieve(&m, &half).unwrap().data(), &[4.5, 5.5, 6.5]);
        assert!(matches!(retrieve(&m, &Tensor::zeros([3])), Err(Error::Dimension(_))));
        assert!(indicator(&schema, 0, 2).is_err());
    }

    #[test]
    fn tape_gradient_hits_only_addressed_row() {
        let schema = small_schema();
        let mut tape = Tape::<f64>::new();
        let m = tape.param(MEMORY, &Tensor::from_fn([4, 3], |i| i as f64 * 0.1));
        let g = retrieve_on_tape(&mut tape, m, &indicator(&schema, 0, 1).unwrap().cast()).unwrap();
        let loss = tape.sum(g).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gm = grads.param(MEMORY).unwrap();
        for (i, &x) in gm.data().iter().enumerate() {
            assert_eq!(x, if i / 3 == 1 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn freeze_toggles_flag() {
        let m = MemoryBlock { matrix: Tensor::zeros([2, 2]), trainable: false };
        assert!(m.clone().unfreeze().trainable);
        assert!(!m.unfreeze().freeze().trainable);
    }
}
