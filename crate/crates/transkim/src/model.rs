//! Model parameters: embeddings, encoder layers, skim predictors, task head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// One named parameter blob, row-major.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub data: Vec<S>,
    pub shape: Vec<usize>,
}

impl<S: Scalar> Param<S> {
    fn new(name: impl Into<String>, data: Vec<S>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Param {
            name: name.into(),
            data,
            shape,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<S: Scalar> {
    pub q_w: Param<S>,
    pub q_b: Param<S>,
    pub k_w: Param<S>,
    pub k_b: Param<S>,
    pub v_w: Param<S>,
    pub v_b: Param<S>,
    pub o_w: Param<S>,
    pub o_b: Param<S>,
    pub ln1_g: Param<S>,
    pub ln1_b: Param<S>,
    pub ffn1_w: Param<S>,
    pub ffn1_b: Param<S>,
    pub ffn2_w: Param<S>,
    pub ffn2_b: Param<S>,
    pub ln2_g: Param<S>,
    pub ln2_b: Param<S>,
}

/// Two-linear-layer skim predictor: `Linear(d,d) -> LN -> GeLU -> Linear(d,2)`.
/// Output channel 1 is keep, channel 0 is skim.
#[derive(Debug, Clone)]
pub struct PredictorParams<S: Scalar> {
    pub lin1_w: Param<S>,
    pub lin1_b: Param<S>,
    pub ln_g: Param<S>,
    pub ln_b: Param<S>,
    pub lin2_w: Param<S>,
    pub lin2_b: Param<S>,
}

#[derive(Debug, Clone)]
pub struct HeadParams<S: Scalar> {
    pub w: Param<S>,
    pub b: Param<S>,
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub tok_emb: Param<S>,
    pub pos_emb: Param<S>,
    pub emb_ln_g: Param<S>,
    pub emb_ln_b: Param<S>,
    pub layers: Vec<LayerParams<S>>,
    pub predictors: Vec<PredictorParams<S>>,
    pub head: HeadParams<S>,
}

fn sample_normal(rng: &mut ChaCha8Rng, mean: f64, sigma: f64) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    mean + sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normal_vec<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, mean: f64, sigma: f64) -> Vec<S> {
    (0..n).map(|_| S::from_f64(sample_normal(rng, mean, sigma))).collect()
}

/// Unbalanced predictor initialization: weights from `N(0, sigma)`, biases
/// zero, except the final bias where the keep channel is centered at `+mu0`
/// and the skim channel at `-mu0`. A fresh predictor therefore keeps nearly
/// everything until training says otherwise.
pub fn init_unbalanced<S: Scalar>(
    params: &mut PredictorParams<S>,
    mu0: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) {
    let d = params.lin1_w.shape[0];
    params.lin1_w.data = normal_vec(rng, d * d, 0.0, sigma);
    params.lin1_b.data = vec![S::zero(); d];
    params.ln_g.data = vec![S::one(); d];
    params.ln_b.data = vec![S::zero(); d];
    params.lin2_w.data = normal_vec(rng, d * 2, 0.0, sigma);
    params.lin2_b.data = vec![
        S::from_f64(sample_normal(rng, -mu0, sigma)),
        S::from_f64(sample_normal(rng, mu0, sigma)),
    ];
}

impl<S: Scalar> Model<S> {
    /// Fresh model: weights from `N(0, sigma)`, zero biases, unit layer-norm
    /// gains, unbalanced predictor bias.
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let dff = config.d_ffn;
        let sigma = config.sigma;
        let tok_emb = Param::new(
            "tok_emb",
            normal_vec(rng, config.vocab_size * d, 0.0, sigma),
            vec![config.vocab_size, d],
        );
        let pos_emb = Param::new(
            "pos_emb",
            normal_vec(rng, config.max_len * d, 0.0, sigma),
            vec![config.max_len, d],
        );
        let emb_ln_g = Param::new("emb_ln.g", vec![S::one(); d], vec![d]);
        let emb_ln_b = Param::new("emb_ln.b", vec![S::zero(); d], vec![d]);
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |suffix: &str| format!("layer{i}.{suffix}");
            layers.push(LayerParams {
                q_w: Param::new(p("q.w"), normal_vec(rng, d * d, 0.0, sigma), vec![d, d]),
                q_b: Param::new(p("q.b"), vec![S::zero(); d], vec![d]),
                k_w: Param::new(p("k.w"), normal_vec(rng, d * d, 0.0, sigma), vec![d, d]),
                k_b: Param::new(p("k.b"), vec![S::zero(); d], vec![d]),
                v_w: Param::new(p("v.w"), normal_vec(rng, d * d, 0.0, sigma), vec![d, d]),
                v_b: Param::new(p("v.b"), vec![S::zero(); d], vec![d]),
                o_w: Param::new(p("o.w"), normal_vec(rng, d * d, 0.0, sigma), vec![d, d]),
                o_b: Param::new(p("o.b"), vec![S::zero(); d], vec![d]),
                ln1_g: Param::new(p("ln1.g"), vec![S::one(); d], vec![d]),
                ln1_b: Param::new(p("ln1.b"), vec![S::zero(); d], vec![d]),
                ffn1_w: Param::new(p("ffn1.w"), normal_vec(rng, d * dff, 0.0, sigma), vec![d, dff]),
                ffn1_b: Param::new(p("ffn1.b"), vec![S::zero(); dff], vec![dff]),
                ffn2_w: Param::new(p("ffn2.w"), normal_vec(rng, dff * d, 0.0, sigma), vec![dff, d]),
                ffn2_b: Param::new(p("ffn2.b"), vec![S::zero(); d], vec![d]),
                ln2_g: Param::new(p("ln2.g"), vec![S::one(); d], vec![d]),
                ln2_b: Param::new(p("ln2.b"), vec![S::zero(); d], vec![d]),
            });
        }
        let mut predictors = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |suffix: &str| format!("pred{i}.{suffix}");
            let mut pp = PredictorParams {
                lin1_w: Param::new(p("lin1.w"), vec![S::zero(); d * d], vec![d, d]),
                lin1_b: Param::new(p("lin1.b"), vec![S::zero(); d], vec![d]),
                ln_g: Param::new(p("ln.g"), vec![S::one(); d], vec![d]),
                ln_b: Param::new(p("ln.b"), vec![S::zero(); d], vec![d]),
                lin2_w: Param::new(p("lin2.w"), vec![S::zero(); d * 2], vec![d, 2]),
                lin2_b: Param::new(p("lin2.b"), vec![S::zero(); 2], vec![2]),
            };
            init_unbalanced(&mut pp, config.mu0, sigma, rng);
            predictors.push(pp);
        }
        let head = HeadParams {
            w: Param::new(
                "head.w",
                normal_vec(rng, d * config.n_classes, 0.0, sigma),
                vec![d, config.n_classes],
            ),
            b: Param::new("head.b", vec![S::zero(); config.n_classes], vec![config.n_classes]),
        };
        Model {
            config,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            predictors,
            head,
        }
    }

    /// All parameters in a fixed, checkpoint-stable order.
    pub fn named_params(&self) -> Vec<&Param<S>> {
        let mut out: Vec<&Param<S>> = vec![
            &self.tok_emb,
            &self.pos_emb,
            &self.emb_ln_g,
            &self.emb_ln_b,
        ];
        for l in &self.layers {
            out.extend([
                &l.q_w, &l.q_b, &l.k_w, &l.k_b, &l.v_w, &l.v_b, &l.o_w, &l.o_b, &l.ln1_g,
                &l.ln1_b, &l.ffn1_w, &l.ffn1_b, &l.ffn2_w, &l.ffn2_b, &l.ln2_g, &l.ln2_b,
            ]);
        }
        for p in &self.predictors {
            out.extend([&p.lin1_w, &p.lin1_b, &p.ln_g, &p.ln_b, &p.lin2_w, &p.lin2_b]);
        }
        out.push(&self.head.w);
        out.push(&self.head.b);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out: Vec<&mut Param<S>> = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.emb_ln_g,
            &mut self.emb_ln_b,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.q_w,
                &mut l.q_b,
                &mut l.k_w,
                &mut l.k_b,
                &mut l.v_w,
                &mut l.v_b,
                &mut l.o_w,
                &mut l.o_b,
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.ffn1_w,
                &mut l.ffn1_b,
                &mut l.ffn2_w,
                &mut l.ffn2_b,
                &mut l.ln2_g,
                &mut l.ln2_b,
            ]);
        }
        for p in &mut self.predictors {
            out.extend([
                &mut p.lin1_w,
                &mut p.lin1_b,
                &mut p.ln_g,
                &mut p.ln_b,
                &mut p.lin2_w,
                &mut p.lin2_b,
            ]);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    /// Parameter count of one skim predictor relative to one encoder layer.
    pub fn predictor_overhead_ratio(&self) -> f64 {
        let pred: usize = [
            &self.predictors[0].lin1_w,
            &self.predictors[0].lin1_b,
            &self.predictors[0].ln_g,
            &self.predictors[0].ln_b,
            &self.predictors[0].lin2_w,
            &self.predictors[0].lin2_b,
        ]
        .iter()
        .map(|p| p.data.len())
        .sum();
        let l = &self.layers[0];
        let layer: usize = [
            &l.q_w, &l.q_b, &l.k_w, &l.k_b, &l.v_w, &l.v_b, &l.o_w, &l.o_b, &l.ln1_g, &l.ln1_b,
            &l.ffn1_w, &l.ffn1_b, &l.ffn2_w, &l.ffn2_b, &l.ln2_g, &l.ln2_b,
        ]
        .iter()
        .map(|p| p.data.len())
        .sum();
        pred as f64 / layer as f64
    }
}

/// Graph leaves for every parameter of a model, one forward pass worth.
pub struct BoundModel<S: Scalar> {
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub emb_ln_g: Tensor<S>,
    pub emb_ln_b: Tensor<S>,
    pub layers: Vec<BoundLayer<S>>,
    pub predictors: Vec<BoundPredictor<S>>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
    /// Leaves in `named_params` order, for gradient readout.
    pub order: Vec<(String, Tensor<S>)>,
}

pub struct BoundLayer<S: Scalar> {
    pub q_w: Tensor<S>,
    pub q_b: Tensor<S>,
    pub k_w: Tensor<S>,
    pub k_b: Tensor<S>,
    pub v_w: Tensor<S>,
    pub v_b: Tensor<S>,
    pub o_w: Tensor<S>,
    pub o_b: Tensor<S>,
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub ffn1_w: Tensor<S>,
    pub ffn1_b: Tensor<S>,
    pub ffn2_w: Tensor<S>,
    pub ffn2_b: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
}

pub struct BoundPredictor<S: Scalar> {
    pub lin1_w: Tensor<S>,
    pub lin1_b: Tensor<S>,
    pub ln_g: Tensor<S>,
    pub ln_b: Tensor<S>,
    pub lin2_w: Tensor<S>,
    pub lin2_b: Tensor<S>,
}

impl<S: Scalar> BoundModel<S> {
    pub fn bind(model: &Model<S>, graph: &Graph<S>) -> Self {
        let mut order = Vec::new();
        let mut leaf = |p: &Param<S>| {
            let t = graph.leaf(p.data.clone(), &p.shape);
            order.push((p.name.clone(), t.clone()));
            t
        };
        let tok_emb = leaf(&model.tok_emb);
        let pos_emb = leaf(&model.pos_emb);
        let emb_ln_g = leaf(&model.emb_ln_g);
        let emb_ln_b = leaf(&model.emb_ln_b);
        let layers = model
            .layers
            .iter()
            .map(|l| BoundLayer {
                q_w: leaf(&l.q_w),
                q_b: leaf(&l.q_b),
                k_w: leaf(&l.k_w),
                k_b: leaf(&l.k_b),
                v_w: leaf(&l.v_w),
                v_b: leaf(&l.v_b),
                o_w: leaf(&l.o_w),
                o_b: leaf(&l.o_b),
                ln1_g: leaf(&l.ln1_g),
                ln1_b: leaf(&l.ln1_b),
                ffn1_w: leaf(&l.ffn1_w),
                ffn1_b: leaf(&l.ffn1_b),
                ffn2_w: leaf(&l.ffn2_w),
                ffn2_b: leaf(&l.ffn2_b),
                ln2_g: leaf(&l.ln2_g),
                ln2_b: leaf(&l.ln2_b),
            })
            .collect();
        let predictors = model
            .predictors
            .iter()
            .map(|p| BoundPredictor {
                lin1_w: leaf(&p.lin1_w),
                lin1_b: leaf(&p.lin1_b),
                ln_g: leaf(&p.ln_g),
                ln_b: leaf(&p.ln_b),
                lin2_w: leaf(&p.lin2_w),
                lin2_b: leaf(&p.lin2_b),
            })
            .collect();
        let head_w = leaf(&model.head.w);
        let head_b = leaf(&model.head.b);
        BoundModel {
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            predictors,
            head_w,
            head_b,
            order,
        }
    }

    /// Leaf gradients in `named_params` order; zeros where nothing flowed.
    pub fn grads(&self) -> Vec<Vec<S>> {
        self.order
            .iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![S::zero(); t.numel()]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn binding_order_matches_named_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model: Model<f32> = Model::new(ModelConfig::desk(), &mut rng);
        let graph = Graph::new();
        let bound = BoundModel::bind(&model, &graph);
        let names: Vec<&str> = model.named_params().iter().map(|p| p.name.as_str()).collect();
        let bound_names: Vec<&str> = bound.order.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, bound_names);
    }

    #[test]
    fn same_seed_same_model() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: Model<f32> = Model::new(ModelConfig::desk(), &mut r1);
        let b: Model<f32> = Model::new(ModelConfig::desk(), &mut r2);
        for (pa, pb) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(pa.data, pb.data, "{}", pa.name);
        }
    }

    #[test]
    fn predictor_bias_is_unbalanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model: Model<f64> = Model::new(ModelConfig::desk(), &mut rng);
        for p in &model.predictors {
            let b = &p.lin2_b.data;
            // keep-channel bias minus skim-channel bias centers on 2*mu0 = 10.
            let diff = b[1] - b[0];
            assert!((diff - 10.0).abs() < 1.0, "diff {diff}");
        }
    }

    #[test]
    fn predictor_parameter_overhead_near_one_twelfth_of_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model: Model<f32> = Model::new(ModelConfig::desk(), &mut rng);
        let r = model.predictor_overhead_ratio();
        // d*d + 2d dominates against ~12*d*d per encoder layer.
        assert!(r > 0.05 && r < 0.12, "ratio {r}");
    }
}
