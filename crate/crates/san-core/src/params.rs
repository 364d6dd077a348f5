//! Named parameter tensors and gradient maps.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// An ordered map of named parameter tensors. Iteration order is the sorted
/// name order, which fixes initialization draw order, leaf registration
/// order, and checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(String::from(name), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn coordinate_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Rounds every tensor onto the f32 grid (the storage precision).
    pub fn quantize_f32(&mut self) {
        for t in self.map.values_mut() {
            t.quantize_f32();
        }
    }

    /// Registers every parameter as a differentiable leaf on a tape.
    pub fn bind(&self, tape: &mut Tape) -> ParamNodes {
        self.bind_with_grad(tape, true)
    }

    /// Registers every parameter as a non-differentiable constant (inference).
    pub fn bind_constant(&self, tape: &mut Tape) -> ParamNodes {
        self.bind_with_grad(tape, false)
    }

    fn bind_with_grad(&self, tape: &mut Tape, requires_grad: bool) -> ParamNodes {
        let mut nodes = BTreeMap::new();
        for (name, t) in &self.map {
            nodes.insert(name.clone(), tape.leaf(t.clone(), requires_grad));
        }
        ParamNodes { nodes }
    }

    /// Arithmetic mean of several parameter sets; names and shapes must
    /// agree. Sums in f64, result quantized to the f32 storage grid.
    pub fn average(sets: &[Params]) -> Result<Params> {
        let Some(first) = sets.first() else {
            return Err(Error::Contract("average: no parameter sets"));
        };
        let mut out = first.clone();
        for (name, acc) in out.map.iter_mut() {
            for other in &sets[1..] {
                let Some(t) = other.map.get(name) else {
                    return Err(Error::InvalidParameter(alloc::format!(
                        "average: parameter {name} missing from a checkpoint"
                    )));
                };
                if t.shape() != acc.shape() {
                    return Err(Error::InvalidParameter(alloc::format!(
                        "average: parameter {name} has shape {:?} vs {:?}",
                        t.shape(),
                        acc.shape()
                    )));
                }
                for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
        }
        for other in &sets[1..] {
            for name in other.map.keys() {
                if !first.map.contains_key(name) {
                    return Err(Error::InvalidParameter(alloc::format!(
                        "average: unexpected parameter {name} in a checkpoint"
                    )));
                }
            }
        }
        let n = sets.len() as f64;
        for t in out.map.values_mut() {
            for v in t.data_mut() {
                *v /= n;
            }
            t.quantize_f32();
        }
        Ok(out)
    }
}

/// Tape leaves for one bound parameter set.
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn extract_grads(&self, tape: &Tape, grads: &mut crate::tape::Gradients) -> GradMap {
        let mut out = GradMap::new();
        for (name, &id) in &self.nodes {
            let g = grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Glorot-uniform init for a rows x cols matrix: U(+-sqrt(6/(fan_in+fan_out))).
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let bound = libm::sqrt(6.0 / (rows + cols) as f64);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    let mut t = Tensor::new(alloc::vec![rows, cols], data).unwrap();
    // Parameters live on the f32 grid from the start.
    t.quantize_f32();
    t
}
