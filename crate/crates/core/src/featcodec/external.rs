//! Shell-out hook for external image codecs (PNG, JPEG, ...).
//!
//! The tile is written as a binary PGM, `encode_cmd` turns it into a coded
//! file, and `decode_cmd` turns that back into a PGM. Templates are run with
//! `sh -c` after substituting `{in}`, `{out}` and `{q}`. When the environment
//! variable `CIFT_CODEC_DIR` is set it is prepended to `PATH`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::process::Command;

use super::pgm::{read_pgm, write_pgm};
use super::tiling::TiledImage;
use crate::error::{Error, Result};

pub const CODEC_DIR_ENV: &str = "CIFT_CODEC_DIR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalCodec {
    pub encode_cmd: String,
    pub decode_cmd: String,
}

#[derive(Debug, Clone)]
pub struct ExternalOutput {
    /// Size of the coded file in bytes, container included.
    pub coded_bytes: usize,
    pub decoded: TiledImage,
}

impl ExternalCodec {
    pub fn new(encode_cmd: impl Into<String>, decode_cmd: impl Into<String>) -> Self {
        Self { encode_cmd: encode_cmd.into(), decode_cmd: decode_cmd.into() }
    }

    /// Encodes and decodes `img` (levels of `bits` bits) at `quality`.
    pub fn run(&self, img: &TiledImage, bits: u8, quality: Option<u32>) -> Result<ExternalOutput> {
        let dir = tempfile::tempdir()?;
        let src = dir.path().join("tile.pgm");
        let coded = dir.path().join("tile.coded");
        let decoded = dir.path().join("decoded.pgm");
        write_pgm(BufWriter::new(File::create(&src)?), img, bits)?;

        let q = quality.map(|q| q.to_string()).unwrap_or_default();
        run_template(&self.encode_cmd, &src.to_string_lossy(), &coded.to_string_lossy(), &q)?;
        let coded_bytes = fs::metadata(&coded)
            .map_err(|e| Error::ExternalTool(format!("encoder produced no output: {e}")))?
            .len() as usize;
        run_template(&self.decode_cmd, &coded.to_string_lossy(), &decoded.to_string_lossy(), &q)?;

        let g = read_pgm(File::open(&decoded).map_err(|e| {
            Error::ExternalTool(format!("decoder produced no output: {e}"))
        })?)
        .map_err(|e| Error::ExternalTool(format!("undecodable decoder output: {e}")))?;
        if g.width != img.width() || g.height != img.height() {
            return Err(Error::ExternalTool(format!(
                "decoder returned {}x{}, expected {}x{}",
                g.width,
                g.height,
                img.width(),
                img.height()
            )));
        }
        let top = if bits <= 8 { (1u32 << bits) - 1 } else { 65535 };
        let pixels = g
            .samples
            .iter()
            .map(|&s| {
                let v = if g.maxval as u32 == top {
                    s as u32
                } else {
                    ((s as f64) * top as f64 / g.maxval as f64).round() as u32
                };
                v.min((1u32 << bits) - 1) as u16
            })
            .collect();
        let decoded = TiledImage::new(img.grid_rows(), img.grid_cols(), img.tile_h(), img.tile_w(), pixels)?;
        Ok(ExternalOutput { coded_bytes, decoded })
    }
}

fn run_template(template: &str, input: &str, output: &str, quality: &str) -> Result<()> {
    let cmd = template.replace("{in}", input).replace("{out}", output).replace("{q}", quality);
    let mut command = Command::new("sh");
    command.arg("-c").arg(&cmd);
    if let Some(dir) = std::env::var_os(CODEC_DIR_ENV) {
        let mut path = std::ffi::OsString::from(dir);
        if let Some(old) = std::env::var_os("PATH") {
            path.push(":");
            path.push(old);
        }
        command.env("PATH", path);
    }
    let out = command
        .output()
        .map_err(|e| Error::ExternalTool(format!("cannot run `{cmd}`: {e}")))?;
    if !out.status.success() {
        return Err(Error::ExternalTool(format!(
            "`{cmd}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(())
}
