//! Named parameter traversal shared by the optimizer and checkpoint I/O.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type ParamSink<'a> = dyn FnMut(&str, &[usize], &[f64]) + 'a;
pub type ParamSinkMut<'a> = dyn FnMut(&str, &[usize], &mut [f64]) + 'a;

/// Visits every parameter array in a fixed order under a dotted name.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut ParamSink<'_>);
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamSinkMut<'_>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn collect<P: Parameters + ?Sized>(p: &P) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    p.visit("", &mut |name, shape, values| {
        out.push(NamedTensor {
            name: name.trim_start_matches('.').to_string(),
            shape: shape.to_vec(),
            values: values.to_vec(),
        })
    });
    out
}

pub fn count<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, v| n += v.len());
    n
}

/// Overwrites parameters by name. Every parameter must be present with a
/// matching shape.
pub fn load<P: Parameters + ?Sized>(p: &mut P, tensors: &[NamedTensor]) -> Result<()> {
    let by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut problem = None;
    p.visit_mut("", &mut |name, shape, values| {
        if problem.is_some() {
            return;
        }
        let name = name.trim_start_matches('.');
        match by_name.get(name) {
            Some(t) if t.shape == shape => values.copy_from_slice(&t.values),
            Some(t) => {
                problem = Some(format!("parameter {name}: shape {:?} != expected {:?}", t.shape, shape))
            }
            None => problem = Some(format!("parameter {name} missing")),
        }
    });
    match problem {
        Some(msg) => Err(Error::Format(msg)),
        None => Ok(()),
    }
}

/// Rounds every parameter to the nearest `f32` so that checkpoints, which
/// store 32-bit payloads, reload bit-exactly.
pub fn round_to_f32<P: Parameters + ?Sized>(p: &mut P) {
    p.visit_mut("", &mut |_, _, values| {
        for v in values.iter_mut() {
            *v = *v as f32 as f64;
        }
    });
}
