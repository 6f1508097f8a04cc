use rand::Rng;

use super::layers::{Layer, LayerCache};
use super::{KernelError, Param, Scalar, Tensor};

/// How batch normalization and dropout behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ForwardMode {
    /// Batch statistics (running statistics updated), dropout active.
    Train,
    /// Stored running statistics, dropout off.
    Eval,
    /// Statistics recomputed from the current input only; running
    /// statistics are neither read nor written. Dropout off.
    AdaBn,
}

/// Record of one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Tape<T = f32> {
    pub mode: ForwardMode,
    caches: Vec<LayerCache<T>>,
}

impl<T> Tape<T> {
    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }
}

/// A sequential layer graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        input: &Tensor<T>,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Tape<T>), KernelError> {
        self.run(input, mode, rng, None)
    }

    /// Forward pass that also returns every intermediate layer output.
    pub fn forward_trace<R: Rng + ?Sized>(
        &mut self,
        input: &Tensor<T>,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<Vec<Tensor<T>>, KernelError> {
        let mut outputs = Vec::with_capacity(self.layers.len());
        self.run(input, mode, rng, Some(&mut outputs))?;
        Ok(outputs)
    }

    fn run<R: Rng + ?Sized>(
        &mut self,
        input: &Tensor<T>,
        mode: ForwardMode,
        rng: &mut R,
        mut trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<(Tensor<T>, Tape<T>), KernelError> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (index, layer) in self.layers.iter_mut().enumerate() {
            let name = layer.name();
            let got = x.shape().to_vec();
            let (y, cache) = layer
                .forward(x, mode, rng)
                .map_err(|expected| KernelError::ShapeMismatch {
                    index,
                    layer: name,
                    expected,
                    got,
                })?;
            if !y.is_finite() {
                return Err(KernelError::NonFinite { index, layer: name });
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(y.clone());
            }
            caches.push(cache);
            x = y;
        }
        Ok((x, Tape { mode, caches }))
    }

    /// Accumulates dLoss/dParam into every trainable parameter's gradient.
    pub fn backward(&mut self, tape: &Tape<T>, loss_grad: &Tensor<T>) -> Result<(), KernelError> {
        self.backward_impl(tape, loss_grad, false).map(|_| ())
    }

    /// Like [`Network::backward`], additionally returning dLoss/dInput.
    pub fn backward_input(&mut self, tape: &Tape<T>, loss_grad: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
        self.backward_impl(tape, loss_grad, true)
            .map(|g| g.expect("input gradient requested"))
    }

    fn backward_impl(
        &mut self,
        tape: &Tape<T>,
        loss_grad: &Tensor<T>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>, KernelError> {
        if tape.mode != ForwardMode::Train {
            return Err(KernelError::TapeMode(tape.mode));
        }
        if tape.caches.len() != self.layers.len() {
            return Err(KernelError::TapeLength {
                tape: tape.caches.len(),
                layers: self.layers.len(),
            });
        }
        // Propagation stops below the lowest layer that still has trainable
        // parameters unless the caller wants the input gradient.
        let lowest = if need_input {
            0
        } else {
            match self.layers.iter().position(|l| l.has_trainable()) {
                Some(i) => i,
                None => return Ok(None),
            }
        };
        let mut g = loss_grad.clone();
        for index in (lowest..self.layers.len()).rev() {
            let want = need_input || index > lowest;
            match self.layers[index].backward(&tape.caches[index], &g, want) {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(need_input.then_some(g))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.params().into_iter().map(|(_, p)| p))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// `"{layer index}.{layer name}.{field}"` for every parameter.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |(field, _)| format!("{i}.{}.{field}", l.name()))
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }
}
