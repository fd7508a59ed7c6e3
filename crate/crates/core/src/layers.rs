//! Thin parameter handles over graph leaves.

use crate::error::Result;
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
}

impl Conv {
    pub fn apply(&self, g: &mut Graph, x: Var, stride: usize, pad: usize) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, stride, pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}
