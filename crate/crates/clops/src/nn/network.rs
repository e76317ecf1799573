//! Dropout feedforward classifier.
//!
//! The network is a plain MLP with ReLU activations and inverted dropout
//! after every hidden layer. Dropout masks are sampled per forward pass,
//! which makes repeated stochastic passes over the same input a Monte
//! Carlo approximation of the posterior predictive — the mechanism the
//! buffer-acquisition scoring relies on.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

/// Forward-pass mode. `Train` and `Mc` sample a fresh dropout mask from
/// the supplied stream; `Eval` is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input width, hidden widths, output width (class count).
    pub layer_widths: Vec<usize>,
    /// Probability of dropping a hidden unit; in `[0, 1)`.
    pub dropout_prob: f64,
    pub activation: Activation,
}

impl NetworkConfig {
    pub fn new(layer_widths: Vec<usize>, dropout_prob: f64) -> Result<Self, NnError> {
        let cfg = NetworkConfig {
            layer_widths,
            dropout_prob,
            activation: Activation::Relu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_widths.len() < 3 {
            return Err(NnError::InvalidConfig(
                "layer_widths needs input, at least one hidden, and output".into(),
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(NnError::InvalidConfig("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(NnError::InvalidConfig("dropout_prob must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    fn hidden_widths(&self) -> &[usize] {
        &self.layer_widths[1..self.layer_widths.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[in x out]` weight matrix.
    pub weights: Tensor,
    /// `[1 x out]` bias row.
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
}

/// Per-hidden-layer inverted-dropout masks for one batch.
///
/// Entries are `0` (dropped) or `1/keep_prob` (kept and rescaled), so the
/// expected masked activation equals the eval-mode activation. The
/// identity mask is all ones, making eval a plain forward pass.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub layers: Vec<Tensor>,
    pub keep_prob: f64,
}

impl DropoutMask {
    pub fn sample(
        config: &NetworkConfig,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        let keep = 1.0 - config.dropout_prob;
        let mut layers = Vec::new();
        for &width in config.hidden_widths() {
            let data: Vec<f64> = (0..batch * width)
                .map(|_| {
                    if config.dropout_prob > 0.0 && rng.random::<f64>() < config.dropout_prob {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect();
            layers.push(Tensor::matrix(batch, width, data)?);
        }
        Ok(DropoutMask { layers, keep_prob: keep })
    }

    pub fn identity(config: &NetworkConfig, batch: usize) -> Result<Self, NnError> {
        let layers = config
            .hidden_widths()
            .iter()
            .map(|&w| Tensor::matrix(batch, w, vec![1.0; batch * w]))
            .collect::<Result<_, _>>()?;
        Ok(DropoutMask { layers, keep_prob: 1.0 })
    }
}

/// Graph handles for every parameter, in layer order.
pub struct ParamNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

/// Gradients for every parameter, mirroring [`Network::layers`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Network {
    /// He-uniform initialization from the init stream.
    pub fn init(config: NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        config.validate()?;
        let mut layers = Vec::new();
        for pair in config.layer_widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            layers.push(Layer {
                weights: Tensor::matrix(fan_in, fan_out, w)?,
                bias: Tensor::matrix(1, fan_out, vec![0.0; fan_out])?,
            });
        }
        Ok(Network { config, layers })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self, NnError> {
        config.validate()?;
        let layers = config
            .layer_widths
            .windows(2)
            .map(|pair| Layer {
                weights: Tensor::zeros(vec![pair[0], pair[1]]),
                bias: Tensor::zeros(vec![1, pair[1]]),
            })
            .collect();
        Ok(Network { config, layers })
    }

    /// Logits for a batch. `Train`/`Mc` draw a fresh mask from `rng`;
    /// `Eval` never touches it.
    pub fn forward(
        &self,
        batch: &Tensor,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, NnError> {
        let mask = self.mask_for(batch, mode, rng)?;
        self.forward_with_mask(batch, &mask)
    }

    /// Deterministic forward pass under a fixed mask.
    pub fn forward_with_mask(&self, batch: &Tensor, mask: &DropoutMask) -> Result<Tensor, NnError> {
        self.check_batch(batch)?;
        let mut h = batch.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = super::tensor::matmul(&h, &layer.weights)?;
            let c = z.cols();
            for i in 0..z.rows() {
                for j in 0..c {
                    z.data_mut()[i * c + j] += layer.bias.data()[j];
                }
            }
            if k < last {
                for v in z.data_mut().iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                let m = &mask.layers[k];
                if m.shape() != z.shape() {
                    return Err(NnError::ShapeMismatch {
                        context: "dropout mask",
                        expected: z.shape().to_vec(),
                        actual: m.shape().to_vec(),
                    });
                }
                for (v, mv) in z.data_mut().iter_mut().zip(m.data()) {
                    *v *= mv;
                }
            }
            z.check_finite("forward activation")?;
            h = z;
        }
        Ok(h)
    }

    /// Record the forward pass on a tape, returning the logits node.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &ParamNodes,
        input: NodeId,
        mask: &DropoutMask,
    ) -> Result<NodeId, NnError> {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (k, &(w, b)) in params.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b)?;
            h = if k < last {
                let a = g.relu(z)?;
                let m = g.leaf(mask.layers[k].clone())?;
                g.mul_elem(a, m)?
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Insert every parameter as a graph leaf, in layer order.
    pub fn insert_params(&self, g: &mut Graph) -> Result<ParamNodes, NnError> {
        let mut layers = Vec::new();
        for layer in &self.layers {
            let w = g.leaf(layer.weights.clone())?;
            let b = g.leaf(layer.bias.clone())?;
            layers.push((w, b));
        }
        Ok(ParamNodes { layers })
    }

    /// Read parameter gradients back off the tape after `backward`.
    pub fn collect_grads(&self, g: &Graph, params: &ParamNodes) -> Result<Gradients, NnError> {
        let mut layers = Vec::new();
        for &(w, b) in &params.layers {
            layers.push((g.grad(w)?, g.grad(b)?));
        }
        Ok(Gradients { layers })
    }

    pub fn mask_for(
        &self,
        batch: &Tensor,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DropoutMask, NnError> {
        self.check_batch(batch)?;
        match mode {
            Mode::Eval => DropoutMask::identity(&self.config, batch.rows()),
            Mode::Train | Mode::Mc => {
                if self.config.dropout_prob == 0.0 {
                    return DropoutMask::identity(&self.config, batch.rows());
                }
                let rng = rng.ok_or(NnError::MissingRng)?;
                DropoutMask::sample(&self.config, batch.rows(), rng)
            }
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<(), NnError> {
        if batch.shape().len() != 2 || batch.cols() != self.config.input_width() {
            return Err(NnError::ShapeMismatch {
                context: "forward input",
                expected: vec![0, self.config.input_width()],
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Flat view of all parameters, layer order, weights before bias.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }
}

/// Checkpoint document: config echo, parameters in layer order, and the
/// experiment root seed. JSON round-trips are bitwise exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
    pub root_seed: u64,
}

impl Checkpoint {
    pub fn of(net: &Network, root_seed: u64) -> Self {
        Checkpoint {
            config: net.config.clone(),
            layers: net.layers.clone(),
            root_seed,
        }
    }

    pub fn into_network(self) -> Result<(Network, u64), NnError> {
        let net = Network {
            config: self.config,
            layers: self.layers,
        };
        net.config.validate()?;
        Ok((net, self.root_seed))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NnError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NnError> {
        let json = std::fs::read_to_string(path).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        serde_json::from_str(&json).map_err(|e| NnError::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    fn small_config() -> NetworkConfig {
        NetworkConfig::new(vec![4, 8, 3], 0.1).unwrap()
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = derive(seed, Stream::Scenario);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn config_requires_hidden_layer() {
        assert!(NetworkConfig::new(vec![4, 3], 0.1).is_err());
        assert!(NetworkConfig::new(vec![4, 8, 3], 1.0).is_err());
    }

    #[test]
    fn zero_weight_network_outputs_zero_logits() {
        let net = Network::zeros(small_config()).unwrap();
        let x = batch(5, 4, 1);
        let y = net.forward(&x, Mode::Eval, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mc_without_dropout_is_deterministic() {
        let cfg = NetworkConfig::new(vec![4, 8, 3], 0.0).unwrap();
        let mut init = derive(3, Stream::Init);
        let net = Network::init(cfg, &mut init).unwrap();
        let x = batch(2, 4, 2);
        let mut r1 = derive(10, Stream::MonteCarlo);
        let mut r2 = derive(99, Stream::MonteCarlo);
        let y1 = net.forward(&x, Mode::Mc, Some(&mut r1)).unwrap();
        let y2 = net.forward(&x, Mode::Mc, Some(&mut r2)).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn eval_forward_is_bitwise_repeatable() {
        let mut init = derive(4, Stream::Init);
        let net = Network::init(small_config(), &mut init).unwrap();
        let x = batch(3, 4, 5);
        let y1 = net.forward(&x, Mode::Eval, None).unwrap();
        let y2 = net.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn eval_equals_train_under_identity_mask() {
        let mut init = derive(6, Stream::Init);
        let net = Network::init(small_config(), &mut init).unwrap();
        let x = batch(3, 4, 7);
        let id_mask = DropoutMask::identity(&net.config, 3).unwrap();
        let eval = net.forward(&x, Mode::Eval, None).unwrap();
        let masked = net.forward_with_mask(&x, &id_mask).unwrap();
        assert_eq!(eval, masked);
    }

    #[test]
    fn mask_entries_are_zero_or_inverse_keep() {
        let cfg = NetworkConfig::new(vec![4, 16, 3], 0.3).unwrap();
        let mut rng = derive(9, Stream::Dropout);
        let mask = DropoutMask::sample(&cfg, 8, &mut rng).unwrap();
        let keep = 1.0 / 0.7;
        for layer in &mask.layers {
            for &v in layer.data() {
                assert!(v == 0.0 || (v - keep).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn train_mode_requires_rng_when_dropout_positive() {
        let mut init = derive(6, Stream::Init);
        let net = Network::init(small_config(), &mut init).unwrap();
        let x = batch(2, 4, 7);
        assert!(matches!(
            net.forward(&x, Mode::Train, None),
            Err(NnError::MissingRng)
        ));
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let net = Network::zeros(small_config()).unwrap();
        let x = batch(2, 5, 1);
        assert!(matches!(
            net.forward(&x, Mode::Eval, None),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let mut init = derive(11, Stream::Init);
        let net = Network::init(small_config(), &mut init).unwrap();
        let x = batch(4, 4, 12);
        let mut drop = derive(13, Stream::Dropout);
        let mask = DropoutMask::sample(&net.config, 4, &mut drop).unwrap();

        let plain = net.forward_with_mask(&x, &mask).unwrap();

        let mut g = Graph::new();
        let params = net.insert_params(&mut g).unwrap();
        let input = g.leaf(x.clone()).unwrap();
        let logits = net.forward_graph(&mut g, &params, input, &mask).unwrap();
        assert_eq!(g.value(logits), &plain);
    }

    #[test]
    fn inverted_dropout_expectation_matches_eval_single_linear_layer() {
        // One hidden layer, identity-ish second layer: averaging masked
        // hidden activations over many masks approaches the eval output.
        let cfg = NetworkConfig::new(vec![2, 4, 4], 0.4).unwrap();
        let mut net = Network::zeros(cfg).unwrap();
        // First layer fixed weights; second layer identity to read the
        // masked hidden activations directly.
        net.layers[0].weights =
            Tensor::matrix(2, 4, vec![0.5, -0.25, 1.0, 0.75, -0.5, 0.25, 0.3, 0.9]).unwrap();
        net.layers[0].bias = Tensor::matrix(1, 4, vec![0.1, 0.2, 0.0, -0.1]).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        net.layers[1].weights = Tensor::matrix(4, 4, eye).unwrap();

        let x = Tensor::matrix(1, 2, vec![0.8, 0.6]).unwrap();
        let eval = net.forward(&x, Mode::Eval, None).unwrap();

        let trials = 20_000;
        let mut rng = derive(21, Stream::Dropout);
        let mut sums = vec![0.0; 4];
        let mut sq_sums = vec![0.0; 4];
        for _ in 0..trials {
            let y = net.forward(&x, Mode::Mc, Some(&mut rng)).unwrap();
            for j in 0..4 {
                sums[j] += y.data()[j];
                sq_sums[j] += y.data()[j] * y.data()[j];
            }
        }
        for j in 0..4 {
            let mean = sums[j] / trials as f64;
            let var = (sq_sums[j] / trials as f64 - mean * mean).max(0.0);
            let se = (var / trials as f64).sqrt();
            assert!(
                (mean - eval.data()[j]).abs() <= 3.0 * se.max(1e-12),
                "unit {j}: mc mean {mean} vs eval {} (se {se})",
                eval.data()[j]
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_exact() {
        let mut init = derive(31, Stream::Init);
        let net = Network::init(small_config(), &mut init).unwrap();
        let dir = std::env::temp_dir().join("clops_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.json");
        Checkpoint::of(&net, 31).save(&path).unwrap();
        let (loaded, seed) = Checkpoint::load(&path).unwrap().into_network().unwrap();
        assert_eq!(seed, 31);
        assert_eq!(loaded, net);
        for (a, b) in loaded.layers.iter().zip(net.layers.iter()) {
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        std::fs::remove_file(&path).ok();
    }
}
