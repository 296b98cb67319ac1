//! Text checkpoint container.
//!
//! ```text
//! TRUSTTUNE-CHECKPOINT 1
//! kind <encoder|model>
//! config <single-line JSON echo of the config>
//! tensor <name> <d1>x<d2>...
//! <f64 bit patterns as 16-digit hex, space separated>
//! ...
//! end
//! sha256 <hex digest of every byte above this line>
//! ```
//!
//! Values are stored as exact bit patterns, so a load reproduces the saved
//! parameters bitwise. The trailing digest is verified on load.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::encoder::{EncoderConfig, EncoderParams};
use super::head::{HeadParams, LinearLayer};
use super::spectral::SpectralState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "TRUSTTUNE-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

impl Checkpoint {
    pub fn render(&self) -> String {
        let mut body = format!("{MAGIC}\nkind {}\nconfig {}\n", self.kind, self.config);
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            body.push_str(&format!("tensor {name} {}\n", dims.join("x")));
            let vals: Vec<String> = t.values().iter().map(|v| format!("{:016x}", v.to_bits())).collect();
            body.push_str(&vals.join(" "));
            body.push('\n');
        }
        body.push_str("end\n");
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        body.push_str(&format!("sha256 {digest}\n"));
        body
    }

    pub fn parse(text: &str) -> Result<Self> {
        let split = text
            .rfind("sha256 ")
            .ok_or_else(|| bad("missing sha256 trailer"))?;
        let (body, trailer) = text.split_at(split);
        let stored = trailer.trim_end().trim_start_matches("sha256 ");
        let actual = hex::encode(Sha256::digest(body.as_bytes()));
        if stored != actual {
            return Err(bad(format!("content hash mismatch: stored {stored}, computed {actual}")));
        }
        let mut lines = body.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("unrecognized header"));
        }
        let kind = lines
            .next()
            .and_then(|l| l.strip_prefix("kind "))
            .ok_or_else(|| bad("missing kind line"))?
            .to_string();
        let config = lines
            .next()
            .and_then(|l| l.strip_prefix("config "))
            .ok_or_else(|| bad("missing config line"))?;
        let config: serde_json::Value = serde_json::from_str(config)?;
        let mut tensors = Vec::new();
        loop {
            let line = lines.next().ok_or_else(|| bad("missing end marker"))?;
            if line == "end" {
                break;
            }
            let mut parts = line.split(' ');
            if parts.next() != Some("tensor") {
                return Err(bad(format!("expected tensor line, got '{line}'")));
            }
            let name = parts.next().ok_or_else(|| bad("tensor without name"))?.to_string();
            let dims = parts
                .next()
                .ok_or_else(|| bad(format!("tensor {name} without shape")))?
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|e| bad(format!("tensor {name} shape: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let data = lines.next().ok_or_else(|| bad(format!("tensor {name} without data")))?;
            let values = data
                .split(' ')
                .map(|h| {
                    u64::from_str_radix(h, 16)
                        .map(f64::from_bits)
                        .map_err(|e| bad(format!("tensor {name} value '{h}': {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(dims, values)?));
        }
        Ok(Self { kind, config, tensors })
    }

    /// Writes the checkpoint and returns the sha256 of the file contents.
    pub fn save(&self, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = self.render();
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| bad(format!("missing tensor '{name}'")))?;
        Ok(self.tensors.remove(pos).1)
    }
}

/// sha256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl EncoderParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "encoder".into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: EncoderConfig = serde_json::from_value(ckpt.config.get("encoder").cloned().unwrap_or_else(|| ckpt.config.clone()))?;
        config.validate()?;
        let mut rng = crate::rng::named_stream(0, "checkpoint-shape");
        let mut params = EncoderParams::init(config, &mut rng)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut ckpt = ckpt.clone();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = ckpt.take(name)?;
            if t.shape() != slot.shape() {
                return Err(bad(format!("tensor '{name}' has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(params)
    }
}

/// Encoder plus head in one container (kind `model`).
pub fn model_checkpoint(encoder: &EncoderParams, head: &HeadParams) -> Checkpoint {
    let mut ckpt = encoder.to_checkpoint();
    ckpt.kind = "model".into();
    ckpt.config = serde_json::json!({
        "encoder": encoder.config,
        "head_layers": head.layers.len(),
        "spectral": head.spectral_enabled,
    });
    for (i, l) in head.layers.iter().enumerate() {
        ckpt.tensors.push((format!("head.{i}.weight"), l.weight.clone()));
        ckpt.tensors.push((format!("head.{i}.bias"), l.bias.clone()));
        if let Some(st) = &l.spectral {
            ckpt.tensors.push((format!("head.{i}.spectral_u"), Tensor::vector(st.u.clone()).expect("non-empty")));
            ckpt.tensors.push((format!("head.{i}.spectral_v"), Tensor::vector(st.v.clone()).expect("non-empty")));
        }
    }
    ckpt
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(EncoderParams, HeadParams)> {
    if ckpt.kind != "model" {
        return Err(bad(format!("expected a model checkpoint, got kind '{}'", ckpt.kind)));
    }
    let encoder = EncoderParams::from_checkpoint(ckpt)?;
    let n_layers = ckpt.config["head_layers"]
        .as_u64()
        .ok_or_else(|| bad("missing head_layers"))? as usize;
    let spectral = ckpt.config["spectral"].as_bool().unwrap_or(false);
    let mut rest = ckpt.clone();
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let weight = rest.take(&format!("head.{i}.weight"))?;
        let bias = rest.take(&format!("head.{i}.bias"))?;
        let state = if spectral {
            let u = rest.take(&format!("head.{i}.spectral_u"))?.into_values();
            let v = rest.take(&format!("head.{i}.spectral_v"))?.into_values();
            Some(SpectralState { u, v })
        } else {
            None
        };
        layers.push(LinearLayer {
            weight,
            bias,
            spectral: state,
        });
    }
    Ok((encoder, HeadParams::from_layers(layers, spectral)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadConfig;
    use crate::rng::{stream, Stream};

    #[test]
    fn encoder_round_trip_is_bitwise() {
        let p = EncoderParams::init(EncoderConfig::default(), &mut stream(1, Stream::Init)).unwrap();
        let back = EncoderParams::from_checkpoint(&Checkpoint::parse(&p.to_checkpoint().render()).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn model_round_trip_keeps_spectral_state() {
        let mut rng = stream(2, Stream::Init);
        let e = EncoderParams::init(EncoderConfig::default(), &mut rng).unwrap();
        let cfg = HeadConfig {
            spectral: true,
            ..HeadConfig::new(16, 3)
        };
        let h = HeadParams::init(&cfg, &mut rng).unwrap();
        let text = model_checkpoint(&e, &h).render();
        let (e2, h2) = model_from_checkpoint(&Checkpoint::parse(&text).unwrap()).unwrap();
        assert_eq!(e2, e);
        assert_eq!(h2, h);
    }

    #[test]
    fn tampering_is_detected() {
        let p = EncoderParams::init(EncoderConfig::default(), &mut stream(1, Stream::Init)).unwrap();
        let text = p.to_checkpoint().render().replacen("blocks.0.wq", "blocks.0.wx", 1);
        assert!(Checkpoint::parse(&text).is_err());
    }
}
