use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// A batch of inputs `[N, ...]` with one class label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.ndim() < 2 || inputs.batch_len() != labels.len() {
            return Err(Error::dim(
                "LabeledSet",
                "0",
                format!("{:?} inputs vs {} labels", inputs.shape(), labels.len()),
            ));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let inputs = self.inputs.gather(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(inputs, labels)
    }

    pub fn concat(&self, other: &LabeledSet) -> Result<Self> {
        let inputs = Tensor::concat(&self.inputs, &other.inputs)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(inputs, labels)
    }
}

/// Edit pairs `(x, x′)` with the label of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub x: Tensor,
    pub x_prime: Tensor,
    pub labels: Vec<usize>,
}

impl PairSet {
    pub fn new(x: Tensor, x_prime: Tensor, labels: Vec<usize>) -> Result<Self> {
        if x.shape() != x_prime.shape() {
            return Err(Error::dim(
                "PairSet",
                "shape",
                format!("{:?} vs {:?}", x.shape(), x_prime.shape()),
            ));
        }
        if x.batch_len() != labels.len() {
            return Err(Error::dim("PairSet", "0", "label count mismatch"));
        }
        Ok(Self { x, x_prime, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The `(x′, y)` view used for supervised editing and evaluation.
    pub fn primed(&self) -> LabeledSet {
        LabeledSet {
            inputs: self.x_prime.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn originals(&self) -> LabeledSet {
        LabeledSet {
            inputs: self.x.clone(),
            labels: self.labels.clone(),
        }
    }
}
