//! Checkpoint serialization.
//!
//! A checkpoint is a single file with a human-readable head and a raw
//! little-endian payload:
//!
//! ```text
//! gradgpt-checkpoint v1          ← magic line
//! d: 8                           ← flat key:value configuration
//! ...
//!                                ← blank line ends the configuration
//! tok_emb.w 11 8 8               ← manifest: name rows cols byte-width
//! ...
//!                                ← blank line ends the manifest
//! <raw little-endian numbers, tensor after tensor, row-major>
//! ```
//!
//! Tensors appear in the fixed traversal order of
//! [`ModelParams::visit`](super::ModelParams::visit), which makes saving
//! and re-saving byte-identical. Loading is strict: every name, shape, and
//! scalar width must match the configuration in the head, and the payload
//! length must be exact.
//!
//! Adapter checkpoints (`gradgpt-adapters v1`) carry only the adapter
//! tensors plus a hash of the base checkpoint they were trained against, so
//! mixing adapters into the wrong base fails loudly instead of silently.

use super::{name_is_adapter, LoraAttach, LoraConfig, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::scalar::Scalar;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

const MODEL_MAGIC: &str = "gradgpt-checkpoint v1";
const ADAPTER_MAGIC: &str = "gradgpt-adapters v1";

/// 64-bit FNV-1a over a byte string. Used to fingerprint the base
/// checkpoint an adapter set belongs to.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

// ---------------------------------------------------------------------------
// Head (configuration) serialization
// ---------------------------------------------------------------------------

fn write_config(out: &mut Vec<u8>, config: &ModelConfig) {
    let mut line = |k: &str, v: String| {
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(b": ");
        out.extend_from_slice(v.as_bytes());
        out.push(b'\n');
    };
    line("d", config.d.to_string());
    line("n_h", config.n_h.to_string());
    line("d_h", config.d_h.to_string());
    line("d_rho", config.d_rho.to_string());
    line("n_blocks", config.n_blocks.to_string());
    line("n_vocab", config.n_vocab.to_string());
    line("n_context", config.n_context.to_string());
    line("activation", config.activation.name().to_string());
    line("eps", format!("{}", config.eps));
    line("weight_tying", config.weight_tying.to_string());
    if let Some(l) = &config.lora {
        line("lora.r", l.r.to_string());
        line("lora.alpha", format!("{}", l.alpha));
        line("lora.attach", l.attach.to_list());
    }
}

struct Head {
    config: ModelConfig,
    base_hash: Option<u64>,
}

fn parse_head(lines: &[&str]) -> Result<Head> {
    let mut pairs = Vec::new();
    for line in lines {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| bad(format!("malformed configuration line '{line}'")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let get = |key: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("configuration is missing '{key}'")))
    };
    let opt = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
        v.parse().map_err(|_| bad(format!("cannot parse {key} value '{v}'")))
    }

    let lora = match (opt("lora.r"), opt("lora.alpha"), opt("lora.attach")) {
        (None, None, None) => None,
        (Some(r), Some(alpha), Some(attach)) => Some(LoraConfig {
            r: num("lora.r", r)?,
            alpha: num("lora.alpha", alpha)?,
            attach: LoraAttach::parse(attach)?,
        }),
        _ => return Err(bad("incomplete adapter configuration (need lora.r, lora.alpha, lora.attach)")),
    };
    let config = ModelConfig {
        d: num("d", get("d")?)?,
        n_h: num("n_h", get("n_h")?)?,
        d_h: num("d_h", get("d_h")?)?,
        d_rho: num("d_rho", get("d_rho")?)?,
        n_blocks: num("n_blocks", get("n_blocks")?)?,
        n_vocab: num("n_vocab", get("n_vocab")?)?,
        n_context: num("n_context", get("n_context")?)?,
        activation: Activation::parse(get("activation")?)?,
        eps: num("eps", get("eps")?)?,
        weight_tying: num("weight_tying", get("weight_tying")?)?,
        lora,
    };
    config.validate()?;
    let base_hash = match opt("base_hash") {
        None => None,
        Some(v) => Some(
            u64::from_str_radix(v, 16).map_err(|_| bad(format!("cannot parse base_hash '{v}'")))?,
        ),
    };
    Ok(Head { config, base_hash })
}

// ---------------------------------------------------------------------------
// Whole-file structure
// ---------------------------------------------------------------------------

struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    width: usize,
}

struct RawCheckpoint<'a> {
    head: Head,
    manifest: Vec<ManifestEntry>,
    payload: &'a [u8],
}

/// Split the file into magic, head, manifest, and payload. Byte-exact: the
/// payload begins immediately after the manifest's terminating blank line.
fn parse_file<'a>(bytes: &'a [u8], expected_magic: &str, path: &Path) -> Result<RawCheckpoint<'a>> {
    let mut offset = 0;
    let mut next_line = |what: &str| -> Result<&'a str> {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(format!("{}: truncated before {what}", path.display())))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| bad(format!("{}: non-UTF-8 text in {what}", path.display())))?;
        offset += end + 1;
        Ok(line)
    };

    let magic = next_line("the magic line")?;
    if magic != expected_magic {
        return Err(bad(format!(
            "{}: not a recognized file (expected the first line to be '{expected_magic}', found '{magic}')",
            path.display()
        )));
    }
    let mut head_lines = Vec::new();
    loop {
        let line = next_line("the configuration")?;
        if line.is_empty() {
            break;
        }
        head_lines.push(line);
    }
    let head = parse_head(&head_lines)?;

    let mut manifest = Vec::new();
    loop {
        let line = next_line("the tensor manifest")?;
        if line.is_empty() {
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(bad(format!("malformed manifest line '{line}' (want: name rows cols width)")));
        }
        let parse_dim = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| bad(format!("malformed manifest line '{line}'")))
        };
        manifest.push(ManifestEntry {
            name: parts[0].to_string(),
            rows: parse_dim(parts[1])?,
            cols: parse_dim(parts[2])?,
            width: parse_dim(parts[3])?,
        });
    }
    Ok(RawCheckpoint { head, manifest, payload: &bytes[offset..] })
}

/// Serialize head + manifest + payload for the tensors `filter` admits.
fn render<T: Scalar>(
    magic: &str,
    params: &ModelParams<T>,
    config: &ModelConfig,
    base_hash: Option<u64>,
    filter: &dyn Fn(&str) -> bool,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    write_config(&mut out, config);
    if let Some(h) = base_hash {
        out.extend_from_slice(format!("base_hash: {h:016x}\n").as_bytes());
    }
    out.push(b'\n');
    params.visit(&mut |name, view| {
        if filter(name) {
            out.extend_from_slice(
                format!("{name} {} {} {}\n", view.rows, view.cols, T::WIDTH).as_bytes(),
            );
        }
    });
    out.push(b'\n');
    params.visit(&mut |name, view| {
        if filter(name) {
            for &x in view.data {
                x.write_le(&mut out);
            }
        }
    });
    out
}

/// Copy payload bytes into `params` for the tensors `filter` admits,
/// enforcing exact name/shape/width agreement with the manifest.
fn load_tensors<T: Scalar>(
    raw: &RawCheckpoint<'_>,
    params: &mut ModelParams<T>,
    filter: &dyn Fn(&str) -> bool,
    path: &Path,
) -> Result<()> {
    let expected_bytes: usize = raw.manifest.iter().map(|e| e.rows * e.cols * e.width).sum();
    if raw.payload.len() != expected_bytes {
        return Err(bad(format!(
            "{}: payload holds {} bytes but the manifest promises {expected_bytes}",
            path.display(),
            raw.payload.len()
        )));
    }
    let mut idx = 0;
    let mut pos = 0;
    let mut problem: Option<Error> = None;
    params.visit_mut(&mut |name, view| {
        if problem.is_some() || !filter(name) {
            return;
        }
        let Some(entry) = raw.manifest.get(idx) else {
            problem = Some(bad(format!(
                "{}: file ends before tensor '{name}' (manifest has only {idx} entries)",
                path.display()
            )));
            return;
        };
        if entry.name != name || entry.rows != view.rows || entry.cols != view.cols {
            problem = Some(bad(format!(
                "{}: tensor {idx} is '{}' ({}×{}) but this model expects '{name}' ({}×{})",
                path.display(),
                entry.name,
                entry.rows,
                entry.cols,
                view.rows,
                view.cols
            )));
            return;
        }
        if entry.width != T::WIDTH {
            problem = Some(bad(format!(
                "{}: stored numbers are {} bytes wide but the requested precision is {} bytes — \
                 re-save the checkpoint at this precision or switch precision",
                path.display(),
                entry.width,
                T::WIDTH
            )));
            return;
        }
        for x in view.data.iter_mut() {
            *x = T::read_le(&raw.payload[pos..pos + T::WIDTH]);
            pos += T::WIDTH;
        }
        idx += 1;
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if idx != raw.manifest.len() {
        return Err(bad(format!(
            "{}: file carries {} extra tensors this model has no place for (first is '{}')",
            path.display(),
            raw.manifest.len() - idx,
            raw.manifest[idx].name
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// Write a full model checkpoint.
pub fn save_model<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<()> {
    config.validate()?;
    let bytes = render(MODEL_MAGIC, params, config, None, &|_| true);
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Read a full model checkpoint saved at scalar width `T::WIDTH`.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(ModelParams<T>, ModelConfig)> {
    let bytes = std::fs::read(path)?;
    let raw = parse_file(&bytes, MODEL_MAGIC, path)?;
    let config = raw.head.config.clone();
    let mut params = ModelParams::<T>::zeros(&config)?;
    load_tensors(&raw, &mut params, &|_| true, path)?;
    Ok((params, config))
}

/// Read only the configuration head of a model checkpoint.
pub fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let bytes = std::fs::read(path)?;
    Ok(parse_file(&bytes, MODEL_MAGIC, path)?.head.config)
}

/// Write an adapter-only checkpoint. `base_hash` should be
/// [`fnv1a64`] of the bytes of the base checkpoint the adapters were
/// trained against.
pub fn save_adapters<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    config: &ModelConfig,
    base_hash: u64,
) -> Result<()> {
    config.validate()?;
    if config.lora.is_none() {
        return Err(Error::Config("cannot save adapters: the configuration attaches none".into()));
    }
    let bytes = render(ADAPTER_MAGIC, params, config, Some(base_hash), &name_is_adapter);
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Read only the configuration head of an adapter checkpoint, plus the
/// stored base-checkpoint fingerprint.
pub fn read_adapter_config(path: &Path) -> Result<(ModelConfig, u64)> {
    let bytes = std::fs::read(path)?;
    let raw = parse_file(&bytes, ADAPTER_MAGIC, path)?;
    let hash = raw
        .head
        .base_hash
        .ok_or_else(|| bad(format!("{}: adapter file lacks a base_hash", path.display())))?;
    Ok((raw.head.config, hash))
}

/// Load adapter tensors into a parameter set that already has adapters
/// attached (zero-valued or otherwise). The file's configuration must match
/// `config` exactly, and its stored base fingerprint must equal
/// `expected_base_hash`.
pub fn load_adapters_into<T: Scalar>(
    path: &Path,
    params: &mut ModelParams<T>,
    config: &ModelConfig,
    expected_base_hash: u64,
) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let raw = parse_file(&bytes, ADAPTER_MAGIC, path)?;
    if raw.head.config != *config {
        return Err(bad(format!(
            "{}: adapter file was written for a different model configuration",
            path.display()
        )));
    }
    let stored = raw
        .head
        .base_hash
        .ok_or_else(|| bad(format!("{}: adapter file lacks a base_hash", path.display())))?;
    if stored != expected_base_hash {
        return Err(bad(format!(
            "{}: adapters were trained against a different base model \
             (stored fingerprint {stored:016x}, this base is {expected_base_hash:016x})",
            path.display()
        )));
    }
    load_tensors(&raw, params, &name_is_adapter, path)
}
