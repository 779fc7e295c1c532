//! Compact U-Net with a projection head.
//!
//! Encoder level `l` runs two 3x3 conv + ReLU blocks at `base * 2^l`
//! channels followed by 2x2 max pooling; the bottleneck runs two more at
//! `base * 2^depth`. The representation is the global average of the
//! bottleneck. Each decoder level upsamples, concatenates the matching
//! encoder activation and fuses both with one 3x3 conv + ReLU; a final 1x1
//! conv maps back to the output channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TowerError};
use crate::nn::graph::{Graph, ParamId, Var};
use crate::nn::state::{ModelState, Owner};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub head_hidden: usize,
    pub embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_channels: 16,
            depth: 2,
            head_hidden: 64,
            embed_dim: 32,
        }
    }
}

impl UNetConfig {
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Width of the pooled representation.
    pub fn repr_dim(&self) -> usize {
        self.channels_at(self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("base_channels", self.base_channels),
            ("head_hidden", self.head_hidden),
            ("embed_dim", self.embed_dim),
        ];
        for (key, v) in checks {
            if v == 0 {
                return Err(TowerError::ConfigKey {
                    key: key.into(),
                    reason: "must be >= 1".into(),
                });
            }
        }
        if self.depth > 6 {
            return Err(TowerError::ConfigKey {
                key: "depth".into(),
                reason: "at most 6".into(),
            });
        }
        Ok(())
    }

    /// Spatial dims must be divisible by `2^depth`.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(TowerError::Config(format!(
                "input {h}x{w} is not divisible by 2^{} = {f}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// Parameter layout of a U-Net inside a [`ModelState`].
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    enc: Vec<[Conv; 2]>,
    bottleneck: [Conv; 2],
    head: [Dense; 2],
    fuse: Vec<Conv>,
    out: Conv,
}

/// Encoder activations kept for the decoder.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub representation: Var,
    pub bottleneck: Var,
    /// Pre-pooling activations, shallowest first.
    pub skips: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// Pre-activation output of the final 1x1 conv.
    pub logits: Var,
    /// `sigmoid(logits)`, in `[0, 1]`.
    pub output: Var,
}

fn conv_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

impl UNet {
    /// Fresh parameters: He-uniform weights, zero biases.
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        cfg: &UNetConfig,
        rng: &mut R,
    ) -> Result<(UNet, ModelState<S>)> {
        cfg.validate()?;
        let mut st = ModelState::new();
        let mut conv = |st: &mut ModelState<S>,
                        name: &str,
                        owner: Owner,
                        cin: usize,
                        cout: usize,
                        k: usize|
         -> Result<Conv> {
            let (wn, bn) = conv_names(name);
            let w = st.push_he_uniform(wn, owner, &[cout, cin, k, k], cin * k * k, rng)?;
            let b = st.push(bn, owner, crate::nn::Tensor::zeros(&[cout]))?;
            Ok(Conv { w, b })
        };
        let mut enc = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.in_channels;
        for l in 0..cfg.depth {
            let c = cfg.channels_at(l);
            let a = conv(
                &mut st,
                &format!("enc.{l}.conv1"),
                Owner::Encoder,
                cin,
                c,
                3,
            )?;
            let b = conv(&mut st, &format!("enc.{l}.conv2"), Owner::Encoder, c, c, 3)?;
            enc.push([a, b]);
            cin = c;
        }
        let cb = cfg.repr_dim();
        let bottleneck = [
            conv(&mut st, "bottleneck.conv1", Owner::Encoder, cin, cb, 3)?,
            conv(&mut st, "bottleneck.conv2", Owner::Encoder, cb, cb, 3)?,
        ];
        let mut fuse = Vec::with_capacity(cfg.depth);
        for l in (0..cfg.depth).rev() {
            let c = cfg.channels_at(l);
            fuse.push(conv(
                &mut st,
                &format!("dec.{l}.fuse"),
                Owner::Decoder,
                cfg.channels_at(l + 1) + c,
                c,
                3,
            )?);
        }
        let out = conv(
            &mut st,
            "dec.out",
            Owner::Decoder,
            cfg.channels_at(0),
            cfg.out_channels,
            1,
        )?;
        let mut dense = |st: &mut ModelState<S>, name: &str, i: usize, o: usize| -> Result<Dense> {
            let (wn, bn) = conv_names(name);
            let w = st.push_he_uniform(wn, Owner::Head, &[o, i], i, rng)?;
            let b = st.push(bn, Owner::Head, crate::nn::Tensor::zeros(&[o]))?;
            Ok(Dense { w, b })
        };
        let head = [
            dense(&mut st, "head.fc1", cb, cfg.head_hidden)?,
            dense(&mut st, "head.fc2", cfg.head_hidden, cfg.embed_dim)?,
        ];
        Ok((
            UNet {
                cfg: cfg.clone(),
                enc,
                bottleneck,
                head,
                fuse,
                out,
            },
            st,
        ))
    }

    /// Locates the layout inside an existing state (e.g. a loaded checkpoint)
    /// and checks every shape.
    pub fn bind<S: Scalar>(cfg: &UNetConfig, st: &ModelState<S>) -> Result<UNet> {
        cfg.validate()?;
        let conv = |name: &str, cin: usize, cout: usize, k: usize| -> Result<Conv> {
            let (wn, bn) = conv_names(name);
            let w = st.id(&wn)?;
            let b = st.id(&bn)?;
            if st.get(w).value.shape() != [cout, cin, k, k] || st.get(b).value.shape() != [cout] {
                return Err(TowerError::Format(format!(
                    "parameter `{name}` has an unexpected shape"
                )));
            }
            Ok(Conv { w, b })
        };
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for l in 0..cfg.depth {
            let c = cfg.channels_at(l);
            enc.push([
                conv(&format!("enc.{l}.conv1"), cin, c, 3)?,
                conv(&format!("enc.{l}.conv2"), c, c, 3)?,
            ]);
            cin = c;
        }
        let cb = cfg.repr_dim();
        let bottleneck = [
            conv("bottleneck.conv1", cin, cb, 3)?,
            conv("bottleneck.conv2", cb, cb, 3)?,
        ];
        let fuse = (0..cfg.depth)
            .rev()
            .map(|l| {
                conv(
                    &format!("dec.{l}.fuse"),
                    cfg.channels_at(l + 1) + cfg.channels_at(l),
                    cfg.channels_at(l),
                    3,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let out = conv("dec.out", cfg.channels_at(0), cfg.out_channels, 1)?;
        let dense = |name: &str, i: usize, o: usize| -> Result<Dense> {
            let (wn, bn) = conv_names(name);
            let (w, b) = (st.id(&wn)?, st.id(&bn)?);
            if st.get(w).value.shape() != [o, i] || st.get(b).value.shape() != [o] {
                return Err(TowerError::Format(format!(
                    "parameter `{name}` has an unexpected shape"
                )));
            }
            Ok(Dense { w, b })
        };
        let head = [
            dense("head.fc1", cb, cfg.head_hidden)?,
            dense("head.fc2", cfg.head_hidden, cfg.embed_dim)?,
        ];
        Ok(UNet {
            cfg: cfg.clone(),
            enc,
            bottleneck,
            head,
            fuse,
            out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    fn conv_relu<S: Scalar>(
        g: &mut Graph<S>,
        st: &ModelState<S>,
        x: Var,
        c: Conv,
        train: bool,
    ) -> Result<Var> {
        let w = st.bind(g, c.w, train);
        let b = st.bind(g, c.b, train);
        let y = g.conv2d(x, w, b, 1)?;
        Ok(g.relu(y))
    }

    /// Runs the encoder on `x` (`N x C x H x W`).
    pub fn forward_encoder<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        st: &ModelState<S>,
        x: Var,
        trainable: bool,
    ) -> Result<EncoderOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(TowerError::Usage(format!(
                "encoder expects N x {} x H x W, got {s:?}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_input(s[2], s[3])?;
        let mut h = x;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for level in &self.enc {
            h = Self::conv_relu(g, st, h, level[0], trainable)?;
            h = Self::conv_relu(g, st, h, level[1], trainable)?;
            skips.push(h);
            h = g.max_pool2(h)?;
        }
        h = Self::conv_relu(g, st, h, self.bottleneck[0], trainable)?;
        let bottleneck = Self::conv_relu(g, st, h, self.bottleneck[1], trainable)?;
        let representation = g.global_avg_pool(bottleneck)?;
        Ok(EncoderOutput {
            representation,
            bottleneck,
            skips,
        })
    }

    /// Two-layer MLP with batch normalization and ReLU on the hidden layer;
    /// output is left unnormalized.
    pub fn forward_head<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        st: &ModelState<S>,
        r: Var,
        trainable: bool,
    ) -> Result<Var> {
        let [fc1, fc2] = self.head;
        let (w1, b1) = (st.bind(g, fc1.w, trainable), st.bind(g, fc1.b, trainable));
        let h = g.dense(r, w1, b1)?;
        let h = g.batch_norm(h, S::lit(1e-5))?;
        let h = g.relu(h);
        let (w2, b2) = (st.bind(g, fc2.w, trainable), st.bind(g, fc2.b, trainable));
        g.dense(h, w2, b2)
    }

    pub fn forward_decoder<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        st: &ModelState<S>,
        enc: &EncoderOutput,
        trainable: bool,
    ) -> Result<DecoderOutput> {
        if enc.skips.len() != self.cfg.depth {
            return Err(TowerError::Usage(format!(
                "decoder needs {} cached skip activations, found {}",
                self.cfg.depth,
                enc.skips.len()
            )));
        }
        let mut h = enc.bottleneck;
        for (fuse, &skip) in self.fuse.iter().zip(enc.skips.iter().rev()) {
            let up = g.upsample2(h)?;
            let cat = g.concat(up, skip)?;
            h = Self::conv_relu(g, st, cat, *fuse, trainable)?;
        }
        let w = st.bind(g, self.out.w, trainable);
        let b = st.bind(g, self.out.b, trainable);
        let logits = g.conv2d(h, w, b, 0)?;
        let output = g.sigmoid(logits);
        Ok(DecoderOutput { logits, output })
    }
}

/// Linear classifier attached to the representation during fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct Classifier {
    w: ParamId,
    b: ParamId,
    pub classes: usize,
}

impl Classifier {
    /// Replaces any existing classifier in `st` with a freshly initialized one.
    pub fn attach<S: Scalar, R: Rng + ?Sized>(
        st: &mut ModelState<S>,
        repr_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Classifier> {
        st.remove_owner(Owner::Classifier);
        let w = st.push_he_uniform(
            "cls.fc.w",
            Owner::Classifier,
            &[classes, repr_dim],
            repr_dim,
            rng,
        )?;
        let b = st.push(
            "cls.fc.b",
            Owner::Classifier,
            crate::nn::Tensor::zeros(&[classes]),
        )?;
        Ok(Classifier { w, b, classes })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, st: &ModelState<S>, r: Var) -> Result<Var> {
        let w = st.bind(g, self.w, true);
        let b = st.bind(g, self.b, true);
        g.dense(r, w, b)
    }
}
