//! Capture of named intermediate feature maps during a forward pass,
//! consumed by the `dump-features` command.

use crate::tensor::{Scalar, Tensor};

pub struct TraceItem<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Default)]
pub struct Trace<T: Scalar> {
    pub items: Vec<TraceItem<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn new() -> Self {
        Trace { items: Vec::new() }
    }

    pub fn record(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.items.push(TraceItem {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data(),
        });
    }
}
