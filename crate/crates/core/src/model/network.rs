use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::capsule;
use crate::error::{Error, Result};
use crate::tensor::{conv3d_output_shape, ConvSpec, Scalar, Tape, Tensor, Var};

/// Which network family a [`Network`] belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    ConvCaps,
    /// Every capsule layer replaced by a 3³ convolution with `T·A` channels.
    ConvBaseline,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::ConvCaps => "convcaps",
            Arch::ConvBaseline => "conv_baseline",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "convcaps" => Ok(Arch::ConvCaps),
            "conv_baseline" | "baseline" => Ok(Arch::ConvBaseline),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        spec: ConvSpec,
        cin: usize,
        cout: usize,
        relu: bool,
    },
    PrimaryCaps {
        types: usize,
    },
    ConvCaps {
        spec: ConvSpec,
        tin: usize,
        tout: usize,
        ain: usize,
        aout: usize,
        iterations: usize,
    },
    /// `[X,Y,Z,T,A] -> [X,Y,Z,T]`
    CapsLength,
    /// `[X,Y,Z,T,A] -> [X,Y,Z,T·A]`
    Flatten,
    Upsample,
    Concat,
    Softmax,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<Source>,
    /// Indices into [`Network::params`].
    pub params: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Layers of the forward pass that the losses and the caller care about.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub seg: usize,
    pub class_scores: usize,
    pub recon: usize,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    pub arch: Arch,
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub params: Vec<Param<T>>,
    pub heads: Heads,
}

/// Recorded outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Output of every layer, in layer order.
    pub layers: Vec<Var>,
    /// Per-voxel class probabilities `[X, Y, Z, C]`.
    pub seg: Var,
    /// Capsule lengths (or the baseline's class probabilities) on the
    /// capsule grid `[X/8, Y/8, Z/8, C]`.
    pub class_scores: Var,
    /// Reconstructed input `[X, Y, Z, M]`.
    pub recon: Var,
}

/// Detached results of an inference pass.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub seg: Tensor<T>,
    pub class_scores: Tensor<T>,
    pub recon: Tensor<T>,
}

struct Builder<T> {
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::from_vec(shape, data).expect("param shape")
    }

    fn add_param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn layer(&mut self, name: &str, kind: LayerKind, inputs: Vec<Source>, params: Vec<usize>) -> Source {
        self.layers.push(Layer {
            name: name.to_string(),
            kind,
            inputs,
            params,
        });
        Source::Layer(self.layers.len() - 1)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, src: Source, cin: usize, cout: usize, spec: ConvSpec, relu: bool) -> Source {
        let fan_in = spec.taps() * cin;
        let [kx, ky, kz] = spec.kernel;
        let w = self.uniform(&[kx, ky, kz, cin, cout], (6.0 / fan_in as f64).sqrt());
        let w = self.add_param(format!("{name}.weight"), w);
        let b = self.add_param(format!("{name}.bias"), Tensor::zeros(&[cout]));
        self.layer(name, LayerKind::Conv { spec, cin, cout, relu }, vec![src], vec![w, b])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_caps(
        &mut self,
        name: &str,
        src: Source,
        spec: ConvSpec,
        (tin, ain): (usize, usize),
        (tout, aout): (usize, usize),
        iterations: usize,
    ) -> Source {
        let fan_in = spec.taps() * tin * ain;
        let [kx, ky, kz] = spec.kernel;
        let w = self.uniform(&[kx, ky, kz, tin, tout, ain, aout], (6.0 / fan_in as f64).sqrt());
        let w = self.add_param(format!("{name}.weight"), w);
        let kind = LayerKind::ConvCaps {
            spec,
            tin,
            tout,
            ain,
            aout,
            iterations,
        };
        self.layer(name, kind, vec![src], vec![w])
    }

    fn op(&mut self, name: &str, kind: LayerKind, inputs: Vec<Source>) -> Source {
        self.layer(name, kind, inputs, Vec::new())
    }
}

fn index(src: Source) -> usize {
    match src {
        Source::Layer(i) => i,
        Source::Input => unreachable!("heads are layers"),
    }
}

impl<T: Scalar> Network<T> {
    /// Builds a network and initializes its parameters from `seed`.
    ///
    /// Conv weights are He-uniform over `k³·Cin`, capsule transforms
    /// He-uniform over `k³·Tin·Ain`, biases zero.
    pub fn build(config: &ModelConfig, arch: Arch, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut b = Builder {
            layers: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let vk = c.visual_kernel;
        let ek = c.encoder_kernel;
        let ck = c.capsule_kernel;

        // visual feature extraction at full resolution
        let mut x = Source::Input;
        let mut cin = c.in_channels;
        for i in 0..3 {
            let spec = ConvSpec::cubic(vk, 1, c.visual_dilations[i]);
            x = b.conv(&format!("visual{}", i + 1), x, cin, c.visual_channels[i], spec, true);
            cin = c.visual_channels[i];
        }
        let visual = x;

        // convolutional encoder: H/2, H/4
        let enc1 = b.conv("enc1", visual, cin, c.encoder_channels[0], ConvSpec::cubic(ek, 2, 1), true);
        let enc2 = b.conv(
            "enc2",
            enc1,
            c.encoder_channels[0],
            c.encoder_channels[1],
            ConvSpec::cubic(ek, 2, 1),
            true,
        );

        let [d0, d1, d2] = c.capsule_dims;
        let [t0, t1] = c.capsule_types;
        let first = ConvSpec::cubic(ck, c.first_capsule_stride, 1);
        let same = ConvSpec::cubic(ck, 1, 1);
        let it = c.routing_iterations;

        let (top, class_scores) = match arch {
            Arch::ConvCaps => {
                let primary = b.op(
                    "primary_caps",
                    LayerKind::PrimaryCaps { types: c.primary_types() },
                    vec![enc2],
                );
                let caps1 = b.conv_caps("caps1", primary, first, (c.primary_types(), d0), (t0, d0), it);
                let caps2 = b.conv_caps("caps2", caps1, same, (t0, d0), (t1, d1), it);
                let caps3 = b.conv_caps("caps3", caps2, same, (t1, d1), (c.classes, d2), it);
                let lengths = b.op("class_lengths", LayerKind::CapsLength, vec![caps3]);
                let flat = b.op("caps_flat", LayerKind::Flatten, vec![caps3]);
                (flat, lengths)
            }
            Arch::ConvBaseline => {
                let e = c.encoder_channels[1];
                let caps1 = b.conv("caps1", enc2, e, t0 * d0, first, true);
                let caps2 = b.conv("caps2", caps1, t0 * d0, t1 * d1, same, true);
                let caps3 = b.conv("caps3", caps2, t1 * d1, c.classes * d2, same, true);
                let head = b.conv("class_head", caps3, c.classes * d2, c.classes, ConvSpec::cubic(1, 1, 1), false);
                let probs = b.op("class_probs", LayerKind::Softmax, vec![head]);
                (caps3, probs)
            }
        };

        // decoder: upsample, concatenate skip, 3³ conv
        let skips = [(enc2, c.encoder_channels[1]), (enc1, c.encoder_channels[0]), (visual, c.visual_channels[2])];
        let mut x = top;
        let mut cin = c.classes * d2;
        for (i, &(skip, skip_ch)) in skips.iter().enumerate() {
            let stage = i + 1;
            if i > 0 || c.first_capsule_stride == 2 {
                x = b.op(&format!("up{stage}"), LayerKind::Upsample, vec![x]);
            }
            let cat = b.op(&format!("skip{stage}"), LayerKind::Concat, vec![x, skip]);
            let cout = c.decoder_channels[i];
            x = b.conv(&format!("dec{stage}"), cat, cin + skip_ch, cout, ConvSpec::cubic(ek, 1, 1), true);
            cin = cout;
        }
        let dec = x;
        let point = ConvSpec::cubic(1, 1, 1);
        let logits = b.conv("seg_logits", dec, cin, c.classes, point, false);
        let seg = b.op("seg", LayerKind::Softmax, vec![logits]);
        let r1 = b.conv("recon1", dec, cin, 2 * cin, point, true);
        let recon = b.conv("recon", r1, 2 * cin, c.in_channels, point, false);

        let net = Network {
            arch,
            config: config.clone(),
            layers: b.layers,
            params: b.params,
            heads: Heads {
                seg: index(seg),
                class_scores: index(class_scores),
                recon: index(recon),
            },
        };
        debug_assert!(net.param_names_unique());
        Ok(net)
    }

    pub fn build_convcaps(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Arch::ConvCaps, seed)
    }

    pub fn build_conv_baseline(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Arch::ConvBaseline, seed)
    }

    fn param_names_unique(&self) -> bool {
        let mut names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        names.windows(2).all(|w| w[0] != w[1])
    }

    /// Exact number of scalar parameters, biases included.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn layer_params(&self, layer: usize) -> usize {
        self.layers[layer].params.iter().map(|&p| self.params[p].value.len()).sum()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Output shape of every layer for an input `[X, Y, Z, M]`, without
    /// evaluating anything.
    pub fn infer_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.config.check_input(input)?;
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ins: Vec<&[usize]> = layer
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input => input,
                    Source::Layer(i) => shapes[i].as_slice(),
                })
                .collect();
            let sp = |s: &[usize]| [s[0], s[1], s[2]];
            let out = match &layer.kind {
                LayerKind::Conv { spec, cout, .. } => {
                    let [x, y, z] = conv3d_output_shape(sp(ins[0]), spec);
                    vec![x, y, z, *cout]
                }
                LayerKind::PrimaryCaps { types } => {
                    let s = ins[0];
                    vec![s[0], s[1], s[2], *types, s[3] / types]
                }
                LayerKind::ConvCaps { spec, tout, aout, .. } => {
                    let [x, y, z] = conv3d_output_shape(sp(ins[0]), spec);
                    vec![x, y, z, *tout, *aout]
                }
                LayerKind::CapsLength => ins[0][..4].to_vec(),
                LayerKind::Flatten => {
                    let s = ins[0];
                    vec![s[0], s[1], s[2], s[3] * s[4]]
                }
                LayerKind::Upsample => {
                    let s = ins[0];
                    vec![2 * s[0], 2 * s[1], 2 * s[2], s[3]]
                }
                LayerKind::Concat => {
                    let mut s = ins[0].to_vec();
                    s[3] = ins.iter().map(|s| s[3]).sum();
                    s
                }
                LayerKind::Softmax => ins[0].to_vec(),
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Records every parameter on `tape` as a tracked leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Forward pass with parameters already bound by [`Network::bind`].
    pub fn forward(&self, tape: &Tape<T>, params: &[Var], input: Var) -> Result<ForwardPass> {
        self.config.check_input(&tape.shape(input))?;
        if params.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ins: Vec<Var> = layer
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input => input,
                    Source::Layer(i) => outs[i],
                })
                .collect();
            let p: Vec<Var> = layer.params.iter().map(|&i| params[i]).collect();
            let out = self
                .eval_layer(tape, layer, &ins, &p)
                .map_err(|e| e.in_layer(&layer.name))?;
            outs.push(out);
        }
        Ok(ForwardPass {
            seg: outs[self.heads.seg],
            class_scores: outs[self.heads.class_scores],
            recon: outs[self.heads.recon],
            layers: outs,
        })
    }

    fn eval_layer(&self, tape: &Tape<T>, layer: &Layer, ins: &[Var], p: &[Var]) -> Result<Var> {
        match &layer.kind {
            LayerKind::Conv { spec, relu, .. } => {
                let y = tape.conv3d(ins[0], p[0], p[1], spec)?;
                if *relu {
                    tape.relu(y)
                } else {
                    Ok(y)
                }
            }
            LayerKind::PrimaryCaps { types } => capsule::primary_caps(tape, ins[0], *types),
            LayerKind::ConvCaps { spec, iterations, .. } => {
                Ok(capsule::conv_capsule(tape, ins[0], p[0], spec, *iterations)?.poses)
            }
            LayerKind::CapsLength => capsule::capsule_length(tape, ins[0]),
            LayerKind::Flatten => {
                let s = tape.shape(ins[0]);
                tape.reshape(ins[0], &[s[0], s[1], s[2], s[3] * s[4]])
            }
            LayerKind::Upsample => tape.upsample3d(ins[0], 2),
            LayerKind::Concat => tape.concat(ins, 3),
            LayerKind::Softmax => tape.softmax(ins[0], 3),
        }
    }

    /// Inference on a single volume without gradient tracking.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Prediction<T>> {
        let tape = Tape::no_grad();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let x = tape.constant(input.clone());
        let pass = self.forward(&tape, &params, x)?;
        Ok(Prediction {
            seg: tape.to_tensor(pass.seg),
            class_scores: tape.to_tensor(pass.class_scores),
            recon: tape.to_tensor(pass.recon),
        })
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch,
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            heads: self.heads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_counts() {
        // Closed forms: k³·Cin·Cout + Cout.
        let mut b = Builder::<f64> {
            layers: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        b.conv("a", Source::Input, 1, 1, ConvSpec::cubic(1, 1, 1), false);
        b.conv("b", Source::Input, 2, 3, ConvSpec::cubic(3, 1, 1), false);
        let counts: Vec<usize> = b.params.iter().map(|p| p.value.len()).collect();
        assert_eq!(counts[0] + counts[1], 2);
        assert_eq!(counts[2] + counts[3], 2 * 3 * 27 + 3);
    }

    #[test]
    fn tiny_forward_shapes() {
        let cfg = ModelConfig::tiny();
        let net = Network::<f64>::build_convcaps(&cfg, 1).unwrap();
        let x = Tensor::<f64>::full(&[8, 8, 8, 1], 0.5);
        let p = net.predict(&x).unwrap();
        assert_eq!(p.seg.shape(), &[8, 8, 8, 2]);
        assert_eq!(p.class_scores.shape(), &[1, 1, 1, 2]);
        assert_eq!(p.recon.shape(), &[8, 8, 8, 1]);

        let tape = Tape::no_grad();
        let params = net.bind(&tape);
        let xv = tape.constant(x);
        let pass = net.forward(&tape, &params, xv).unwrap();
        let inferred = net.infer_shapes(&[8, 8, 8, 1]).unwrap();
        for (i, &v) in pass.layers.iter().enumerate() {
            assert_eq!(tape.shape(v), inferred[i], "layer {}", net.layers[i].name);
        }
    }

    #[test]
    fn forward_rejects_bad_extents() {
        let net = Network::<f64>::build_convcaps(&ModelConfig::tiny(), 1).unwrap();
        assert!(net.predict(&Tensor::zeros(&[12, 8, 8, 1])).is_err());
        assert!(net.predict(&Tensor::zeros(&[8, 8, 8, 2])).is_err());
    }

    #[test]
    fn baseline_has_more_parameters() {
        let cfg = ModelConfig::tiny();
        let caps = Network::<f32>::build_convcaps(&cfg, 0).unwrap();
        let base = Network::<f32>::build_conv_baseline(&cfg, 0).unwrap();
        assert!(base.count_params() > caps.count_params());
        assert!(base.layer_index("primary_caps").is_none());
        assert!(caps.layer_index("class_lengths").is_some());
    }

    #[test]
    fn layer_errors_name_the_layer() {
        let mut net = Network::<f64>::build_convcaps(&ModelConfig::tiny(), 1).unwrap();
        let i = net.params.iter().position(|p| p.name == "enc1.bias").unwrap();
        net.params[i].value.data_mut()[0] = f64::INFINITY;
        let err = net.predict(&Tensor::full(&[8, 8, 8, 1], 0.5)).unwrap_err();
        assert!(err.to_string().contains("enc1"), "{err}");
    }
}
