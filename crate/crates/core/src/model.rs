//! The full matching network: encoders, graph construction and the
//! matching core behind one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::Config;
use crate::encode::{encode_image, encode_text, EncoderParams, EncoderVars};
use crate::error::Result;
use crate::graphbuild::{build_visual_graph, text_graph_weights};
use crate::graphio::{ImageRecord, TextRecord, Vocabulary};
use crate::matching::{
    pair_similarity, visual_layer_weights, ImageSide, MatchParams, MatchVars, PairTrace, TextSide,
};
use crate::params::{BoundParams, ParamStore};

#[derive(Clone, Debug)]
pub struct GsmnModel {
    pub config: Config,
    pub vocab: Vocabulary,
    pub region_dim: usize,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub matching: MatchParams,
}

/// Every parameter of a model bound to one tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub bound: BoundParams,
    pub encoder: EncoderVars,
    pub matching: MatchVars,
}

impl GsmnModel {
    /// Fresh model with parameters drawn from `config.train.seed`.
    pub fn new(config: Config, vocab: Vocabulary, region_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut params = ParamStore::new();
        let encoder = EncoderParams::init(
            &mut params,
            &mut rng,
            vocab.len(),
            config.embed_dim,
            region_dim,
            config.joint_dim,
            config.bidirectional,
            config.freeze_embeddings,
        );
        let matching = MatchParams::init(&mut params, &mut rng, &config.matching);
        Ok(Self {
            config,
            vocab,
            region_dim,
            params,
            encoder,
            matching,
        })
    }

    pub fn bind(&self, tape: &Tape) -> ModelVars {
        let bound = self.params.bind(tape);
        let encoder = self.encoder.bind(&bound);
        let matching = self.matching.bind(&bound);
        ModelVars {
            bound,
            encoder,
            matching,
        }
    }

    fn normalize(&self, tape: &Tape, x: Var) -> Var {
        if self.config.normalize_nodes {
            tape.l2_normalize_rows(x)
        } else {
            x
        }
    }

    /// Word node features and, when the textual structure path is active,
    /// the textual edge weights.
    pub fn text_side(&self, tape: &Tape, vars: &ModelVars, record: &TextRecord) -> Result<TextSide> {
        let raw = encode_text(tape, &record.tokens, &self.vocab, &vars.encoder)?;
        let nodes = self.normalize(tape, raw);
        let m = &self.config.matching;
        let weights = if m.use_structure && m.direction.t2i() {
            let (_, w) =
                text_graph_weights(tape, record, nodes, self.config.variant, self.config.text_lambda)?;
            Some(w)
        } else {
            None
        };
        Ok(TextSide { nodes, weights })
    }

    /// Region node features and, when the visual structure path is active,
    /// per-kernel edge weights for every layer.
    pub fn image_side(&self, tape: &Tape, vars: &ModelVars, record: &ImageRecord) -> Result<ImageSide> {
        let raw = encode_image(tape, record, &vars.encoder)?;
        let nodes = self.normalize(tape, raw);
        let m = &self.config.matching;
        let layer_weights = if m.use_structure && m.direction.i2t() {
            let graph = build_visual_graph(record)?;
            vars.matching
                .visual_gcn
                .iter()
                .map(|layer| visual_layer_weights(tape, &graph, layer))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(ImageSide {
            nodes,
            layer_weights,
        })
    }

    pub fn pair(
        &self,
        tape: &Tape,
        vars: &ModelVars,
        text: &TextSide,
        image: &ImageSide,
    ) -> Result<(Var, PairTrace)> {
        pair_similarity(tape, &self.config.matching, &vars.matching, text, image)
    }

    /// Similarity of one image-text pair on a private tape.
    pub fn global_similarity(&self, image: &ImageRecord, text: &TextRecord) -> Result<f64> {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let t = self.text_side(&tape, &vars, text)?;
        let i = self.image_side(&tape, &vars, image)?;
        let (g, _) = self.pair(&tape, &vars, &t, &i)?;
        Ok(tape.scalar_value(g))
    }

    /// Similarity matrix `[images × texts]`, sharing the encoding of each
    /// record across the row or column.
    pub fn similarity_matrix(&self, images: &[&ImageRecord], texts: &[&TextRecord]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * texts.len());
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let text_sides = texts
            .iter()
            .map(|t| self.text_side(&tape, &vars, t))
            .collect::<Result<Vec<_>>>()?;
        let base = tape.len();
        for img in images {
            let side = self.image_side(&tape, &vars, img)?;
            for t in &text_sides {
                let (g, _) = self.pair(&tape, &vars, t, &side)?;
                data.push(tape.scalar_value(g));
            }
            tape.rewind(base);
        }
        Tensor::matrix(images.len(), texts.len(), data)
    }
}
