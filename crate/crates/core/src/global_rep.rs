//! Weighted global composition `F = (λ-scaled concat of slots)·w_{a*}` and
//! the global ranking loss.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::triplet_term;
use crate::numerics::{ParamSet, Real, Tape, Tensor, Var};
use crate::synthgen::AttributeSchema;

pub const LAMBDA: &str = "global/lambda";
pub const SHARED_PROJECTION: &str = "global/proj/shared";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalConfig {
    /// Output dimension r.
    pub dim: usize,
    /// One projection for every manipulated attribute instead of one each.
    pub shared_projection: bool,
    /// Start from `λ = 1` and identity projections (`r = A·D`) instead of
    /// Gaussian ones; `dim` is then ignored.
    pub identity_init: bool,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self { dim: 32, shared_projection: false, identity_init: true }
    }
}

pub fn projection_name(schema: &AttributeSchema, config: &GlobalConfig, a: usize) -> String {
    if config.shared_projection {
        SHARED_PROJECTION.into()
    } else {
        format!("global/proj/{}", schema.attributes[a].name)
    }
}

pub fn global_names(schema: &AttributeSchema, config: &GlobalConfig) -> Vec<String> {
    let mut names: Vec<String> = (0..schema.len()).map(|a| projection_name(schema, config, a)).collect();
    names.dedup();
    names.push(LAMBDA.into());
    names
}

/// `λ = 1`; projections are identities when `identity_init` is set,
/// otherwise scaled Gaussian with variance `1/(A·D)`.
pub fn init_global(schema: &AttributeSchema, config: &GlobalConfig, rep_dim: usize, seed: u64) -> ParamSet<f32> {
    if config.identity_init {
        return identity_global(schema, config, rep_dim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = schema.len() * rep_dim;
    let normal = Normal::new(0.0f32, (1.0 / width as f32).sqrt()).expect("finite std");
    let mut params = ParamSet::new();
    params.insert(LAMBDA, Tensor::full([schema.len()], 1.0));
    for name in global_names(schema, config).into_iter().filter(|n| n != LAMBDA) {
        params.insert(name, Tensor::from_fn([width, config.dim], |_| normal.sample(&mut rng)));
    }
    params
}

/// `λ = 1` and identity projections (`r = A·D`): `F` is the plain concatenation.
pub fn identity_global(schema: &AttributeSchema, config: &GlobalConfig, rep_dim: usize) -> ParamSet<f32> {
    let width = schema.len() * rep_dim;
    let eye = Tensor::from_fn([width, width], |i| if i / width == i % width { 1.0 } else { 0.0 });
    let mut params = ParamSet::new();
    params.insert(LAMBDA, Tensor::full([schema.len()], 1.0));
    for name in global_names(schema, config).into_iter().filter(|n| n != LAMBDA) {
        params.insert(name, eye.clone());
    }
    params
}

/// Tape handles for λ and the projection of one manipulated attribute.
#[derive(Clone, Copy, Debug)]
pub struct GlobalVars {
    pub lambda: Var,
    pub projection: Var,
}

/// Registers λ and `w_{a*}` as parameters (`trainable`) or constants.
pub fn global_vars<T: Real>(
    tape: &mut Tape<T>,
    schema: &AttributeSchema,
    config: &GlobalConfig,
    params: &ParamSet<T>,
    a_star: usize,
    trainable: bool,
) -> Result<GlobalVars> {
    let name = projection_name(schema, config, a_star);
    let (l, p) = (params.get(LAMBDA)?, params.get(&name)?);
    Ok(if trainable {
        GlobalVars { lambda: tape.param(LAMBDA, l), projection: tape.param(&name, p) }
    } else {
        GlobalVars { lambda: tape.constant(l.clone()), projection: tape.constant(p.clone()) }
    })
}

/// Composes `F` on the tape; `manipulation` replaces slot `a*` with `g`.
pub fn compose_on_tape<T: Real>(
    tape: &mut Tape<T>,
    slots: &[Var],
    manipulation: Option<(usize, Var)>,
    vars: GlobalVars,
) -> Result<Var> {
    let mut parts = slots.to_vec();
    if let Some((a, g)) = manipulation {
        let slot = parts
            .get_mut(a)
            .ok_or_else(|| Error::Usage(format!("no slot {a} among {} representations", slots.len())))?;
        if tape.value(g).shape() != tape.value(*slot).shape() {
            return Err(Error::Dimension("manipulation vector does not match slot width".into()));
        }
        *slot = g;
    }
    let cat = tape.concat(&parts)?;
    let scaled = tape.block_scale(cat, vars.lambda)?;
    tape.matmul(scaled, vars.projection)
}

/// Evaluation-mode composition projected by `w_{a*}`.
pub fn compose(
    reps: &[Tensor<f32>],
    manipulation: Option<(usize, &Tensor<f32>)>,
    a_star: usize,
    schema: &AttributeSchema,
    config: &GlobalConfig,
    params: &ParamSet<f32>,
) -> Result<Tensor<f32>> {
    if reps.len() != schema.len() {
        return Err(Error::Usage(format!("{} representations for {} attributes", reps.len(), schema.len())));
    }
    if a_star >= schema.len() {
        return Err(Error::Argument(format!("attribute index {a_star} out of range")));
    }
    let lambda = params.get(LAMBDA)?;
    lambda.expect_shape(&[schema.len()])?;
    let mut cat = Vec::with_capacity(reps.iter().map(Tensor::len).sum());
    for (a, rep) in reps.iter().enumerate() {
        let src = match manipulation {
            Some((m, g)) if m == a => {
                g.expect_shape(rep.shape())?;
                g
            }
            _ => rep,
        };
        cat.extend(src.data().iter().map(|&v| v * lambda.data()[a]));
    }
    let w = params.get(&projection_name(schema, config, a_star))?;
    w.expect_rank(2)?;
    if w.shape()[0] != cat.len() {
        return Err(Error::Dimension(format!("projection {:?} for concatenation of {}", w.shape(), cat.len())));
    }
    let r = w.shape()[1];
    let mut out = vec![0.0f32; r];
    for (k, &x) in cat.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w.data()[k * r..(k + 1) * r]) {
            *o += x * wv;
        }
    }
    Tensor::new([r], out)
}

/// `L_G = d+(F_{I,t}, F_{I+}, F_{I−})`.
pub fn global_loss<T: Real>(tape: &mut Tape<T>, query: Var, positive: Var, negative: Var) -> Result<Var> {
    triplet_term(tape, query, positive, negative, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalTriplet {
    pub query: usize,
    pub attribute: usize,
    pub value: usize,
    pub positive: usize,
    pub negative: usize,
}

const MAX_QUERY_RETRIES: usize = 1000;

/// Seeded `(query, manipulation, positive, negative)` draws over a labelled
/// set. Positives carry exactly the post-manipulation label vector.
pub fn sample_global_triplets(labels: &[Vec<usize>], schema: &AttributeSchema, count: usize, seed: u64) -> Result<Vec<GlobalTriplet>> {
    for l in labels {
        schema.validate_labels(l)?;
    }
    let mut by_labels: HashMap<&[usize], Vec<usize>> = HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_labels.entry(l.as_slice()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut target = Vec::with_capacity(schema.len());
    for _ in 0..count {
        let mut found = None;
        for _ in 0..MAX_QUERY_RETRIES {
            let query = rng.gen_range(0..labels.len().max(1));
            let Some(q) = labels.get(query) else { break };
            let mut options = Vec::new();
            for a in 0..schema.len() {
                for v in (0..schema.value_count(a)).filter(|&v| v != q[a]) {
                    target.clear();
                    target.extend_from_slice(q);
                    target[a] = v;
                    if by_labels.contains_key(target.as_slice()) {
                        options.push((a, v));
                    }
                }
            }
            if let Some(&(a, v)) = options.choose(&mut rng) {
                found = Some((query, a, v));
                break;
            }
        }
        let (query, attribute, value) = found.ok_or_else(|| Error::Sampling {
            attribute: "any".into(),
            reason: "no query with an achievable manipulation".into(),
        })?;
        target.clear();
        target.extend_from_slice(&labels[query]);
        target[attribute] = value;
        let positive = *by_labels[target.as_slice()].choose(&mut rng).expect("non-empty");
        let negative = loop {
            let n = rng.gen_range(0..labels.len());
            if labels[n] != target {
                break n;
            }
        };
        out.push(GlobalTriplet { query, attribute, value, positive, negative });
    }
    Ok(out)
}
