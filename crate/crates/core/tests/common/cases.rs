//! Gradient-check cases: inputs drawn from a seed plus the function under test.

use std::collections::BTreeMap;

use iagan_core::layers::{
    activation, batchnorm, conv2d, conv2d_transpose, dense, inception_residual_block, self_attention,
    Activation, AttentionVars, BlockSpec, BlockVars, ConvSpec, NormMode, RunningStats,
};
use iagan_core::models::{
    discriminator_forward, generator_forward, init_discriminator, init_generator, DiscriminatorConfig,
    GeneratorConfig, NetworkParams, Variant,
};
use iagan_core::rng::derive_indexed;
use iagan_core::tensor::{Tape, Tensor, Var};
use iagan_core::Result;

use super::random_tensor;

pub type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Builder,
    /// Coordinates checked per input tensor.
    pub max_coords: usize,
}

fn tensors(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random_tensor(s, derive_indexed(seed, "input", i as u64)))
        .collect()
}

fn case(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { inputs, build: Box::new(build), max_coords: usize::MAX }
}

pub const OPS: &[&str] = &[
    "matmul",
    "elementwise",
    "reduce_sum",
    "conv2d",
    "conv2d_stride2",
    "conv2d_transpose",
    "dense",
    "batchnorm",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "softmax",
    "bce",
    "self_attention",
    "inception_residual_block",
    "inception_identity_residual",
    "conv_attention_dense",
];

pub const MODELS: &[&str] = &["generator_iagan", "generator_dcgan", "discriminator_prob", "discriminator_features"];

pub fn build(name: &str, seed: u64) -> Case {
    match name {
        "matmul" => case(tensors(seed, &[&[3, 4], &[4, 2]]), |t, v| t.matmul(v[0], v[1])),
        "elementwise" => {
            let mut inputs = tensors(seed, &[&[2, 3], &[2, 3], &[2, 3]]);
            // log needs a positive argument
            let pos: Vec<f64> = inputs[2].data().iter().map(|x| 0.5 + x.abs()).collect();
            inputs[2] = Tensor::new(vec![2, 3], pos).unwrap();
            case(inputs, |t, v| {
                let a = t.mul(v[0], v[1])?;
                let b = t.sub(a, v[1])?;
                let c = t.abs(b)?;
                let d = t.log(v[2])?;
                let e = t.add(c, d)?;
                let f = t.scale(e, -1.7)?;
                let g = t.neg(v[0])?;
                t.add(f, g)
            })
        }
        "reduce_sum" => case(tensors(seed, &[&[2, 3, 4]]), |t, v| t.reduce_sum(v[0], Some(&[0, 2]))),
        "conv2d" => case(tensors(seed, &[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]]), |t, v| {
            conv2d(t, v[0], &ConvSpec::same(2, 3, 3)?, v[1], Some(v[2]))
        }),
        "conv2d_stride2" => case(tensors(seed, &[&[2, 2, 6, 6], &[3, 2, 5, 5], &[3]]), |t, v| {
            conv2d(t, v[0], &ConvSpec::down(2, 3, 5)?, v[1], Some(v[2]))
        }),
        "conv2d_transpose" => case(tensors(seed, &[&[1, 3, 3, 3], &[3, 2, 3, 3], &[2]]), |t, v| {
            conv2d_transpose(t, v[0], &ConvSpec::up(3, 2, 3)?, v[1], Some(v[2]))
        }),
        "dense" => case(tensors(seed, &[&[2, 3], &[3, 4], &[4]]), |t, v| dense(t, v[0], v[1], v[2])),
        "batchnorm" => case(tensors(seed, &[&[3, 2, 2, 2], &[2], &[2]]), |t, v| {
            let mut stats = RunningStats::new(2);
            batchnorm(t, v[0], v[1], v[2], NormMode::Train { momentum: 0.0 }, &mut stats)
        }),
        "relu" => case(tensors(seed, &[&[2, 5]]), |t, v| activation(t, Activation::Relu, v[0])),
        "leaky_relu" => case(tensors(seed, &[&[2, 5]]), |t, v| activation(t, Activation::LeakyRelu(0.2), v[0])),
        "tanh" => case(tensors(seed, &[&[2, 5]]), |t, v| activation(t, Activation::Tanh, v[0])),
        "sigmoid" => case(tensors(seed, &[&[2, 5]]), |t, v| activation(t, Activation::Sigmoid, v[0])),
        "softmax" => case(tensors(seed, &[&[2, 5]]), |t, v| activation(t, Activation::Softmax(1), v[0])),
        "bce" => case(tensors(seed, &[&[4, 1]]), |t, v| {
            let p = t.sigmoid(v[0])?;
            let real = t.bce(p, 1.0)?;
            let fake = t.bce(p, 0.0)?;
            let both = t.scale(fake, 0.5)?;
            t.add(real, both)
        }),
        "self_attention" => {
            let (c, ck) = (4, 1);
            let inputs = tensors(
                seed,
                &[&[1, c, 3, 3], &[ck, c, 1, 1], &[ck], &[ck, c, 1, 1], &[ck], &[c, c, 1, 1], &[c], &[c, c, 1, 1], &[c], &[1]],
            );
            case(inputs, |t, v| {
                let vars = AttentionVars {
                    query: (v[1], v[2]),
                    key: (v[3], v[4]),
                    value: (v[5], v[6]),
                    output: (v[7], v[8]),
                    gamma: v[9],
                };
                Ok(self_attention(t, v[0], &vars)?.out)
            })
        }
        "inception_residual_block" => inception(seed, 3, 8),
        "inception_identity_residual" => inception(seed, 4, 4),
        "conv_attention_dense" => {
            let (c, ck) = (8, 1);
            let inputs = tensors(
                seed,
                &[
                    &[2, 1, 4, 4],
                    &[c, 1, 3, 3],
                    &[c],
                    &[ck, c, 1, 1],
                    &[ck],
                    &[ck, c, 1, 1],
                    &[ck],
                    &[c, c, 1, 1],
                    &[c],
                    &[c, c, 1, 1],
                    &[c],
                    &[1],
                    &[c * 4, 3],
                    &[3],
                ],
            );
            case(inputs, move |t, v| {
                let h = conv2d(t, v[0], &ConvSpec::down(1, c, 3)?, v[1], Some(v[2]))?;
                let vars = AttentionVars {
                    query: (v[3], v[4]),
                    key: (v[5], v[6]),
                    value: (v[7], v[8]),
                    output: (v[9], v[10]),
                    gamma: v[11],
                };
                let h = self_attention(t, h, &vars)?.out;
                let h = t.reshape(h, vec![2, c * 4])?;
                dense(t, h, v[12], v[13])
            })
        }
        "generator_iagan" => generator(seed, Variant::Iagan),
        "generator_dcgan" => generator(seed, Variant::Dcgan),
        "discriminator_prob" => discriminator(seed, false),
        "discriminator_features" => discriminator(seed, true),
        other => panic!("unknown gradient case {other}"),
    }
}

fn inception(seed: u64, cin: usize, cout: usize) -> Case {
    let spec = BlockSpec::even(cin, cout).unwrap();
    let bc = spec.branch_channels;
    let mut shapes: Vec<Vec<usize>> = vec![vec![2, cin, 5, 5]];
    for (i, k) in [1, 3, 5, 1].into_iter().enumerate() {
        shapes.push(vec![bc[i], cin, k, k]);
        shapes.push(vec![bc[i]]);
    }
    if spec.has_projection() {
        shapes.push(vec![cout, cin, 1, 1]);
        shapes.push(vec![cout]);
    }
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    case(tensors(seed, &refs), move |t, v| {
        let vars = BlockVars {
            branches: [(v[1], v[2]), (v[3], v[4]), (v[5], v[6]), (v[7], v[8])],
            projection: spec.has_projection().then(|| (v[9], v[10])),
        };
        inception_residual_block(t, v[0], &spec, &vars)
    })
}

/// Replaces every learnable tensor with O(1)-scale random values. At the
/// 0.02 initialisation scale many pre-activations sit within the
/// finite-difference step of a ReLU kink, which breaks the oracle rather
/// than the gradient.
fn randomised(mut net: NetworkParams, seed: u64) -> NetworkParams {
    for (i, (name, t)) in net.params.iter_mut().enumerate() {
        let shape = t.shape().to_vec();
        let r = random_tensor(&shape, derive_indexed(seed, "weights", i as u64));
        let (offset, scale) = if name.ends_with("attn.gamma") {
            (0.5, 0.1)
        } else if name.ends_with(".gamma") {
            (1.0, 0.2)
        } else if shape.len() == 1 {
            (0.0, 0.3)
        } else {
            let fan_in: usize = if shape.len() == 2 { shape[0] } else { shape[1..].iter().product() };
            (0.0, 1.0 / (fan_in as f64).sqrt())
        };
        let data = r.data().iter().map(|v| offset + scale * v).collect();
        *t = Tensor::new(shape, data).unwrap();
    }
    net
}

fn network_case(net: NetworkParams, lead: Vec<Tensor>, forward: impl Fn(&NetworkParams, &mut Tape, &[Var], &BTreeMap<String, Var>) -> Result<Var> + 'static) -> Case {
    let names: Vec<String> = net.params.keys().cloned().collect();
    let lead_len = lead.len();
    let mut inputs = lead;
    inputs.extend(net.params.values().cloned());
    let build = move |t: &mut Tape, v: &[Var]| {
        let vars: BTreeMap<String, Var> = names.iter().cloned().zip(v[lead_len..].iter().copied()).collect();
        forward(&net, t, &v[..lead_len], &vars)
    };
    Case { inputs, build: Box::new(build), max_coords: 2 }
}

fn generator(seed: u64, variant: Variant) -> Case {
    let cfg = GeneratorConfig { image_size: 16, z_dim: 6, base_channels: 8, variant, seed };
    let net = randomised(init_generator(&cfg).unwrap(), seed);
    let mut lead = vec![random_tensor(&[2, 6], derive_indexed(seed, "z", 0))];
    if variant == Variant::Iagan {
        let x = random_tensor(&[2, 1, 16, 16], derive_indexed(seed, "x", 0));
        lead.push(Tensor::new(vec![2, 1, 16, 16], x.data().iter().map(|v| v.tanh()).collect()).unwrap());
    }
    network_case(net, lead, move |net, t, lead, vars| {
        let mut buffers = net.buffers.clone();
        let cfg = net.generator_config()?;
        generator_forward(t, cfg, vars, &mut buffers, NormMode::Train { momentum: 0.0 }, lead[0], lead.get(1).copied())
    })
}

fn discriminator(seed: u64, features: bool) -> Case {
    let cfg = DiscriminatorConfig { image_size: 16, base_channels: 4, feature_tap_layer: 3, seed };
    let net = randomised(init_discriminator(&cfg).unwrap(), seed);
    let x = random_tensor(&[3, 1, 16, 16], derive_indexed(seed, "x", 0));
    network_case(net, vec![x], move |net, t, lead, vars| {
        let mut buffers = net.buffers.clone();
        let cfg = net.discriminator_config()?;
        let out = discriminator_forward(t, cfg, vars, &mut buffers, NormMode::Train { momentum: 0.0 }, lead[0], features)?;
        Ok(if features { out.features } else { out.prob.unwrap() })
    })
}
