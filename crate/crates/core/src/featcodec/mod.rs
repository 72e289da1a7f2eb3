//! Feature-tensor codec: tiling, lossless container, external image codecs, BPFE.

mod container;
mod external;
mod pgm;
pub mod rangecoder;
mod tiling;

pub use container::{
    decode_levels, decode_lossless, encode_levels, encode_lossless, Bitstream, BitstreamHeader, CodingMode,
    HEADER_BYTES,
};
pub use external::{ExternalCodec, ExternalOutput, CODEC_DIR_ENV};
pub use pgm::{maxval_for_bits, read_pgm, write_pgm, Graymap};
pub use tiling::{default_grid, tile, untile, TiledImage};

/// Bits per feature element: `total_bits / (H·W·C)`.
pub fn bpfe(total_bits: u64, height: usize, width: usize, channels: usize) -> f64 {
    assert!(height > 0 && width > 0 && channels > 0, "dims must be positive");
    total_bits as f64 / (height * width * channels) as f64
}

/// BPFE of an externally coded file of `bytes` bytes.
pub fn bpfe_from_bytes(bytes: usize, height: usize, width: usize, channels: usize) -> f64 {
    bpfe(bytes as u64 * 8, height, width, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpfe_arithmetic() {
        assert_eq!(bpfe(1024, 8, 16, 8), 1.0);
        assert_eq!(bpfe(8 * 8 * 16 * 8, 8, 16, 8), 8.0);
        assert_eq!(bpfe_from_bytes(128, 8, 16, 8), 1.0);
    }
}
