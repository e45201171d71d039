//! Toy text and image encoders.
//!
//! Captions are four tokens: `<bos> <shape-word> shape <eos>`. The text
//! encoder is a learned token table plus learned positions. Images are split
//! into 4x4 patches of 48 values each; the learned projection of those
//! patches lives in the style extractor.

use crate::diffusion::denoiser::patch_tokens;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::params::{Binding, ParamSet};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

use super::render::{IMAGE_SIZE, SHAPES};

pub const VOCABULARY: [&str; 7] = ["<bos>", "<eos>", "shape", "circle", "square", "triangle", "cross"];
pub const CAPTION_LEN: usize = 4;
pub const PATCH: usize = 4;
pub const IMAGE_TOKENS: usize = (IMAGE_SIZE / PATCH) * (IMAGE_SIZE / PATCH);
pub const PATCH_DIM: usize = PATCH * PATCH * 3;

const BOS: usize = 0;
const EOS: usize = 1;
const SHAPE: usize = 2;

fn vocab_error(word: &str) -> Error {
    Error::Vocabulary {
        word: word.to_string(),
        vocabulary: VOCABULARY.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn token_id(word: &str) -> Result<usize> {
    VOCABULARY.iter().position(|&w| w == word).ok_or_else(|| vocab_error(word))
}

/// Token ids of the caption for content `content`.
pub fn caption_for(content: usize) -> Vec<usize> {
    vec![BOS, SHAPE + 1 + content, SHAPE, EOS]
}

/// Parses a caption. A bare shape word (`"circle"`) or a two-word caption
/// (`"circle shape"`) is wrapped in `<bos>`/`<eos>`; a four-token caption is
/// taken as is.
pub fn parse_caption(text: &str) -> Result<Vec<usize>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let ids = words.iter().map(|w| token_id(w)).collect::<Result<Vec<_>>>()?;
    let ids = match ids.len() {
        1 => vec![BOS, ids[0], SHAPE, EOS],
        2 => vec![BOS, ids[0], ids[1], EOS],
        _ => ids,
    };
    if ids.len() != CAPTION_LEN {
        return Err(Error::Contract(format!(
            "caption {text:?} must have {CAPTION_LEN} tokens, got {}",
            ids.len()
        )));
    }
    Ok(ids)
}

pub fn caption_words(ids: &[usize]) -> String {
    ids.iter().map(|&i| VOCABULARY.get(i).copied().unwrap_or("?")).collect::<Vec<_>>().join(" ")
}

/// Content id named by a caption, if its second token is a shape word.
pub fn caption_content(ids: &[usize]) -> Option<usize> {
    let word = *ids.get(1)?;
    (SHAPE + 1..SHAPE + 1 + SHAPES.len()).contains(&word).then(|| word - SHAPE - 1)
}

/// Text encoder parameters: `text.embed [V, D]`, `text.pos [M, D]` and the
/// null caption `text.null [M, D]` used for the unconditional branch.
pub fn init_text_params<T: Real>(dim: usize, rng: &mut RngStream) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.init_normal("text.embed", &[VOCABULARY.len(), dim], 1.0, rng);
    p.init_normal("text.pos", &[CAPTION_LEN, dim], 0.1, rng);
    p.init_normal("text.null", &[CAPTION_LEN, dim], 1.0, rng);
    p
}

/// `E_T [B, M, D]` for a batch of captions.
pub fn encode_text<T: Real>(g: &mut Graph<T>, p: &Binding, captions: &[Vec<usize>]) -> Result<Var> {
    if captions.is_empty() {
        return Err(dim_err("encode_text of an empty batch"));
    }
    let mut ids = Vec::with_capacity(captions.len() * CAPTION_LEN);
    for c in captions {
        if c.len() != CAPTION_LEN {
            return Err(dim_err(format!("caption of {} tokens, expected {CAPTION_LEN}", c.len())));
        }
        if let Some(&bad) = c.iter().find(|&&i| i >= VOCABULARY.len()) {
            return Err(vocab_error(&format!("#{bad}")));
        }
        ids.extend_from_slice(c);
    }
    let e = g.embedding(p.get("text.embed")?, &ids, &[captions.len(), CAPTION_LEN])?;
    g.add(e, p.get("text.pos")?)
}

/// Null caption tokens repeated over a batch, `[B, M, D]`.
pub fn null_text<T: Real>(g: &mut Graph<T>, p: &Binding, batch: usize) -> Result<Var> {
    let null = p.get("text.null")?;
    let s = g.shape(null).to_vec();
    let null = g.reshape(null, &[1, s[0], s[1]])?;
    g.repeat_outer(null, batch)
}

/// Patch tokens `[S, 48]` of an image, values scaled to `[-1, 1]`.
pub fn encode_image<T: Real>(img: &Image) -> Result<Tensor<T>> {
    if img.width != IMAGE_SIZE || img.height != IMAGE_SIZE {
        return Err(dim_err(format!(
            "expected a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {}x{}",
            img.width, img.height
        )));
    }
    patch_tokens(&img.to_signed_tensor(), PATCH)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn captions_parse_and_identify_content() {
        assert_eq!(parse_caption("circle").unwrap(), caption_for(0));
        assert_eq!(parse_caption("cross shape").unwrap(), caption_for(3));
        assert_eq!(parse_caption("<bos> square shape <eos>").unwrap(), caption_for(1));
        for c in 0..4 {
            assert_eq!(caption_content(&caption_for(c)), Some(c));
        }
        assert_eq!(caption_words(&caption_for(2)), "<bos> triangle shape <eos>");
        match parse_caption("hexagon") {
            Err(Error::Vocabulary { word, vocabulary }) => {
                assert_eq!(word, "hexagon");
                assert_eq!(vocabulary.len(), 7);
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_caption("circle shape shape").is_err());
    }

    #[test]
    fn text_encoding_is_deterministic() {
        let mut rng = RngStream::new(1, 2);
        let p: ParamSet<f32> = init_text_params(8, &mut rng);
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let caps = vec![caption_for(0), caption_for(0), caption_for(1)];
        let e = encode_text(&mut g, &b, &caps).unwrap();
        assert_eq!(g.shape(e), &[3, 4, 8]);
        let v = g.value(e);
        assert_eq!(v.index_outer(0).unwrap(), v.index_outer(1).unwrap());
        assert_ne!(v.index_outer(0).unwrap(), v.index_outer(2).unwrap());
        assert!(encode_text(&mut g, &b, &[vec![0, 1, 2]]).is_err());
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let img = Image::filled(24, 24, [0.2, 0.4, 0.6]);
        let t: Tensor<f64> = encode_image(&img).unwrap();
        assert_eq!(t.shape(), &[IMAGE_TOKENS, PATCH_DIM]);
        let first = &t.data()[..PATCH_DIM];
        assert!(t.data().chunks(PATCH_DIM).all(|c| c == first));
        assert!(encode_image::<f64>(&Image::filled(8, 8, [0.0; 3])).is_err());
    }
}
