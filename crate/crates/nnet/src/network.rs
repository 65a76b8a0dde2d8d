use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointRecord};
use crate::error::{Error, Result};
use crate::layer::{Cache, Layer, LayerSpec};
use crate::optim::Optimizer;
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

/// Activations recorded by [`Network::forward`], consumed by [`Network::backward`].
#[derive(Debug)]
pub struct Trace<T> {
    net: u64,
    version: u64,
    caches: Vec<Cache<T>>,
}

/// Ordered stack of layers.
///
/// Each instance carries an identity and a version counter bumped whenever
/// parameters change, so a trace recorded before an update is rejected.
#[derive(Debug)]
pub struct Network<T> {
    name: String,
    layers: Vec<Layer<T>>,
    id: u64,
    version: u64,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            layers: self.layers.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<T: Scalar> Network<T> {
    pub fn new(name: &str, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| Layer::new(s.clone(), &format!("{name}.{i}"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            layers,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&x, i, true)?;
            caches.push(cache);
            x = y;
        }
        Ok((
            x,
            Trace {
                net: self.id,
                version: self.version,
                caches,
            },
        ))
    }

    /// Forward pass without recording a trace.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x, i, false)?.0;
        }
        Ok(x)
    }

    /// Accumulates parameter gradients for `upstream` and returns the input gradient.
    pub fn backward(&mut self, trace: &Trace<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        if trace.net != self.id || trace.version != self.version {
            return Err(Error::StaleTrace {
                trace_net: trace.net,
                trace_version: trace.version,
                net: self.id,
                version: self.version,
            });
        }
        let mut g = upstream.clone();
        for (i, (layer, cache)) in self.layers.iter_mut().zip(&trace.caches).enumerate().rev() {
            g = layer.backward(cache, &g, i)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    /// Mutable parameter access. Call [`Network::touch`] after changing values.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params().find(|p| p.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(|p| p.zero_grad());
    }

    /// Marks parameters as changed, invalidating outstanding traces.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    pub fn update(&mut self, optimizer: &mut Optimizer<T>) {
        optimizer.step(self.params_mut());
        self.touch();
    }

    /// Sums another replica's gradient accumulators into this one.
    pub fn accumulate_grads_from(&mut self, other: &Network<T>) -> Result<()> {
        for (p, q) in self.params_mut().zip(other.params()) {
            if p.name != q.name {
                return Err(Error::UnknownParameter(q.name.clone()));
            }
            p.grad.add_assign(&q.grad)?;
        }
        Ok(())
    }

    /// Squared L2 norm of all decaying weights, adding `scale * 2w` to their gradients.
    pub fn l2_penalty(&mut self, scale: T) -> T {
        let two = T::from_f64_lossy(2.0);
        let mut total = T::zero();
        for p in self.params_mut().filter(|p| p.decay) {
            total = total + p.value.sum_squares();
            let (v, g) = (p.value.data(), p.grad.data_mut());
            for (gi, &vi) in g.iter_mut().zip(v) {
                *gi = *gi + scale * two * vi;
            }
        }
        total
    }

    pub fn l2_norm_squared(&self) -> T {
        self.params()
            .filter(|p| p.decay)
            .map(|p| p.value.sum_squares())
            .sum()
    }

    pub fn grad_norm(&self) -> T {
        self.params().map(|p| p.grad.sum_squares()).sum::<T>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            name: self.name.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    params: l
                        .params
                        .iter()
                        .map(|p| Parameter {
                            name: p.name.clone(),
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                            decay: p.decay,
                        })
                        .collect(),
                })
                .collect(),
            id: fresh_id(),
            version: 0,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            records: self
                .params()
                .map(|p| CheckpointRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
                })
                .collect(),
        }
    }

    /// Loads every parameter of this network from matching checkpoint records.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for p in self.params_mut() {
            let rec = ckpt
                .records
                .iter()
                .find(|r| r.name == p.name)
                .ok_or_else(|| Error::UnknownParameter(p.name.clone()))?;
            if rec.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint shape {:?} vs {:?}",
                    p.name,
                    rec.shape,
                    p.value.shape()
                )));
            }
            for (d, &s) in p.value.data_mut().iter_mut().zip(&rec.values) {
                *d = T::from_f64_lossy(s as f64);
            }
        }
        self.touch();
        Ok(())
    }
}
