//! Weight layout of the encoder-decoder, generic over what each leaf holds:
//! [`Parameter`](crate::numerics::Parameter)s at rest, tape
//! [`Var`](crate::numerics::Var)s during a forward pass.

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T> {
    pub norm1: Norm<T>,
    pub attn: Attention<T>,
    pub norm2: Norm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<T> {
    pub norm1: Norm<T>,
    pub self_attn: Attention<T>,
    pub norm2: Norm<T>,
    pub cross_attn: Attention<T>,
    pub norm3: Norm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// Shared by input embedding and output projection.
    pub embedding: T,
    pub encoder: Vec<EncoderBlock<T>>,
    pub encoder_norm: Norm<T>,
    pub decoder: Vec<DecoderBlock<T>>,
    pub decoder_norm: Norm<T>,
}

/// Name-aware traversal of a weight tree. `map` and `visit_mut` walk leaves
/// in the same fixed order, which is also the checkpoint order.
pub trait WeightTree<T> {
    type Mapped<U>;
    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U>;
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T> WeightTree<T> for Linear<T> {
    type Mapped<U> = Linear<U>;
    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T> WeightTree<T> for Norm<T> {
    type Mapped<U> = Norm<U>;
    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Norm<U> {
        Norm {
            gain: f(&join(prefix, "gain"), &self.gain),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T> WeightTree<T> for Attention<T> {
    type Mapped<U> = Attention<U>;
    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Attention<U> {
        Attention {
            query: self.query.map(&join(prefix, "query"), f),
            key: self.key.map(&join(prefix, "key"), f),
            value: self.value.map(&join(prefix, "value"), f),
            output: self.output.map(&join(prefix, "output"), f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

impl<T> WeightTree<T> for EncoderBlock<T> {
    type Mapped<U> = EncoderBlock<U>;
    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> EncoderBlock<U> {
        EncoderBlock {
            norm1: self.norm1.map(&join(prefix, "norm1"), f),
            attn: self.attn.map(&join(prefix, "attn"), f),
            norm2: self.norm2.map(&join(prefix, "norm2"), f),
            ff_in: self.ff_in.map(&join(prefix, "ff_in"), f),
            ff_out: self.ff_out.map(&join(prefix, "ff_out"), f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ff_in.visit_mut(&join(prefix, "ff_in"), f);
        self.ff_out.visit_mut(&join(prefix, "ff_out"), f);
    }
}

impl<T> WeightTree<T> for DecoderBlock<T> {
    type Mapped<U> = DecoderBlock<U>;
    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> DecoderBlock<U> {
        DecoderBlock {
            norm1: self.norm1.map(&join(prefix, "norm1"), f),
            self_attn: self.self_attn.map(&join(prefix, "self_attn"), f),
            norm2: self.norm2.map(&join(prefix, "norm2"), f),
            cross_attn: self.cross_attn.map(&join(prefix, "cross_attn"), f),
            norm3: self.norm3.map(&join(prefix, "norm3"), f),
            ff_in: self.ff_in.map(&join(prefix, "ff_in"), f),
            ff_out: self.ff_out.map(&join(prefix, "ff_out"), f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
        self.ff_in.visit_mut(&join(prefix, "ff_in"), f);
        self.ff_out.visit_mut(&join(prefix, "ff_out"), f);
    }
}

impl<T> WeightTree<T> for Weights<T> {
    type Mapped<U> = Weights<U>;
    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Weights<U> {
        Weights {
            embedding: f(&join(prefix, "embedding"), &self.embedding),
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(prefix, &format!("encoder.{i}")), f))
                .collect(),
            encoder_norm: self.encoder_norm.map(&join(prefix, "encoder_norm"), f),
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(prefix, &format!("decoder.{i}")), f))
                .collect(),
            decoder_norm: self.decoder_norm.map(&join(prefix, "decoder_norm"), f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "embedding"), &mut self.embedding);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.encoder_norm.visit_mut(&join(prefix, "encoder_norm"), f);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.decoder_norm.visit_mut(&join(prefix, "decoder_norm"), f);
    }
}
