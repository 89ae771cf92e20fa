use super::{read_tensors, write_tensors, Graph, NnError, Tensor, Var};
use rand::Rng;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Dense feed-forward network: hidden layers use `activation`, the output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// `weights[l]` has shape `[widths[l], widths[l+1]]`.
    pub weights: Vec<Tensor>,
    /// `biases[l]` has shape `[1, widths[l+1]]`.
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// Uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(Tensor::matrix(w[0], w[1], (0..w[0] * w[1]).map(|_| rng.gen_range(-bound..bound)).collect()));
            biases.push(Tensor::matrix(1, w[1], (0..w[1]).map(|_| rng.gen_range(-bound..bound)).collect()));
        }
        Mlp { widths: widths.to_vec(), activation, weights, biases }
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        let weights = widths.windows(2).map(|w| Tensor::zeros(w[0], w[1])).collect();
        let biases = widths.windows(2).map(|w| Tensor::zeros(1, w[1])).collect();
        Mlp { widths: widths.to_vec(), activation, weights, biases }
    }

    /// Single linear layer computing the identity map.
    pub fn identity(n: usize) -> Self {
        let mut m = Mlp::zeros(&[n, n], Activation::Relu);
        for i in 0..n {
            m.weights[0].data[i * n + i] = 1.0;
        }
        m
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        if x.cols() != self.input_width() {
            return Err(NnError::ShapeMismatch(format!("input width {} but network expects {}", x.cols(), self.input_width())));
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul(w);
            let m = z.cols();
            for (k, v) in z.data.iter_mut().enumerate() {
                *v += b.data[k % m];
                if l < last {
                    *v = self.activation.apply(*v);
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass recorded on `g`. Returns the output and the parameter leaves
    /// in [`Mlp::params`] order.
    pub fn forward_on(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>), NnError> {
        let leaves = self.param_leaves(g);
        let y = self.forward_with(g, x, &leaves)?;
        Ok((y, leaves))
    }

    /// Records every parameter as a leaf of `g`.
    pub fn param_leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Forward pass reusing leaves from [`Mlp::param_leaves`], so several inputs
    /// can share one set of parameter gradients.
    pub fn forward_with(&self, g: &mut Graph, x: Var, leaves: &[Var]) -> Result<Var, NnError> {
        self.check_input(g.value(x))?;
        let mut h = x;
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let z = g.matmul(h, leaves[2 * l]);
            let z = g.add_row(z, leaves[2 * l + 1]);
            h = if l < last {
                match self.activation {
                    Activation::Relu => g.relu(z),
                    Activation::Tanh => g.tanh(z),
                }
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Parameters in the order weight0, bias0, weight1, bias1, ...
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    /// `self <- (1 - tau) * self + tau * online`.
    pub fn polyak_from(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.params_mut().into_iter().zip(online.params()) {
            for (a, b) in t.data.iter_mut().zip(&o.data) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }

    pub fn manifest(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!("widths {}\nactivation {}\n", widths.join(","), self.activation.as_str())
    }

    /// Writes `<stem>.bin` (shape-prefixed little-endian f64 arrays) and
    /// `<stem>.manifest` (layer widths and activation).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), NnError> {
        std::fs::write(dir.join(format!("{stem}.manifest")), self.manifest())?;
        write_tensors(&dir.join(format!("{stem}.bin")), &self.params())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Mlp, NnError> {
        let manifest = std::fs::read_to_string(dir.join(format!("{stem}.manifest")))?;
        let mut widths = None;
        let mut activation = None;
        for line in manifest.lines() {
            match line.split_once(' ') {
                Some(("widths", w)) => {
                    widths = Some(
                        w.split(',')
                            .map(|x| x.trim().parse::<usize>().map_err(|e| NnError::Format(e.to_string())))
                            .collect::<Result<Vec<_>, _>>()?,
                    )
                }
                Some(("activation", a)) => activation = Activation::parse(a.trim()),
                _ => {}
            }
        }
        let widths = widths.ok_or_else(|| NnError::Format("manifest lacks widths".into()))?;
        let activation = activation.ok_or_else(|| NnError::Format("manifest lacks activation".into()))?;
        if widths.len() < 2 {
            return Err(NnError::Format("manifest needs at least two widths".into()));
        }
        let mut net = Mlp::zeros(&widths, activation);
        let tensors = read_tensors(&dir.join(format!("{stem}.bin")))?;
        if tensors.len() != 2 * (widths.len() - 1) {
            return Err(NnError::Format(format!("checkpoint holds {} tensors", tensors.len())));
        }
        for (t, loaded) in net.params_mut().into_iter().zip(tensors) {
            if loaded.shape != t.shape {
                return Err(NnError::ShapeMismatch(format!("checkpoint tensor {:?} vs manifest {:?}", loaded.shape, t.shape)));
            }
            *t = loaded;
        }
        Ok(net)
    }
}
