use crate::error::{Error, Result};
use crate::quantizer::LevelTensor;

/// Single-channel image holding all channels of a level tensor in a grid of
/// H×W tiles. Tile `(r, c)` holds channel `r·grid_cols + c`; tiles past the
/// last channel are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TiledImage {
    grid_rows: usize,
    grid_cols: usize,
    tile_h: usize,
    tile_w: usize,
    pixels: Vec<u16>,
}

impl TiledImage {
    pub fn new(grid_rows: usize, grid_cols: usize, tile_h: usize, tile_w: usize, pixels: Vec<u16>) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 || tile_h == 0 || tile_w == 0 {
            return Err(Error::data("tiled image dims must be positive"));
        }
        if pixels.len() != grid_rows * grid_cols * tile_h * tile_w {
            return Err(Error::data(format!(
                "tiled image {grid_rows}x{grid_cols} of {tile_h}x{tile_w} tiles needs {} pixels, got {}",
                grid_rows * grid_cols * tile_h * tile_w,
                pixels.len()
            )));
        }
        Ok(Self { grid_rows, grid_cols, tile_h, tile_w, pixels })
    }

    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    pub fn tile_h(&self) -> usize {
        self.tile_h
    }

    pub fn tile_w(&self) -> usize {
        self.tile_w
    }

    /// Image height in pixels.
    pub fn height(&self) -> usize {
        self.grid_rows * self.tile_h
    }

    /// Image width in pixels.
    pub fn width(&self) -> usize {
        self.grid_cols * self.tile_w
    }

    /// Row-major pixels, `height() × width()`.
    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn capacity(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

/// Default tile grid `(rows, cols)` for `channels` tiles.
///
/// Powers of two get `cols = 2^⌈log₂√C⌉`, `rows = C / cols`; anything else gets
/// `cols = ⌈√C⌉`, `rows = ⌈C / cols⌉`.
pub fn default_grid(channels: usize) -> (usize, usize) {
    assert!(channels > 0, "channel count must be positive");
    if channels.is_power_of_two() {
        let k = channels.trailing_zeros() as usize;
        let cols = 1usize << k.div_ceil(2);
        (channels / cols, cols)
    } else {
        let mut cols = (channels as f64).sqrt().ceil() as usize;
        // Guard against sqrt rounding for large non-squares.
        while cols * cols < channels {
            cols += 1;
        }
        while cols > 1 && (cols - 1) * (cols - 1) >= channels {
            cols -= 1;
        }
        (channels.div_ceil(cols), cols)
    }
}

pub fn tile(levels: &LevelTensor, grid: Option<(usize, usize)>) -> Result<TiledImage> {
    let c = levels.channels();
    let (rows, cols) = grid.unwrap_or_else(|| default_grid(c));
    if rows == 0 || cols == 0 || rows * cols < c {
        return Err(Error::contract(format!("grid {rows}x{cols} cannot hold {c} channels")));
    }
    let (h, w) = (levels.height(), levels.width());
    let img_w = cols * w;
    let mut pixels = vec![0u16; rows * cols * h * w];
    for ch in 0..c {
        let (gr, gc) = (ch / cols, ch % cols);
        let src = levels.channel_slice(ch);
        for y in 0..h {
            let dst = (gr * h + y) * img_w + gc * w;
            pixels[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    TiledImage::new(rows, cols, h, w, pixels)
}

pub fn untile(img: &TiledImage, channels: usize) -> Result<LevelTensor> {
    if channels == 0 || channels > img.capacity() {
        return Err(Error::data(format!(
            "{channels} channels do not fit a {}x{} tile grid",
            img.grid_rows, img.grid_cols
        )));
    }
    let (h, w) = (img.tile_h, img.tile_w);
    let img_w = img.width();
    let mut data = Vec::with_capacity(channels * h * w);
    for ch in 0..channels {
        let (gr, gc) = (ch / img.grid_cols, ch % img.grid_cols);
        for y in 0..h {
            let src = (gr * h + y) * img_w + gc * w;
            data.extend_from_slice(&img.pixels[src..src + w]);
        }
    }
    LevelTensor::new(h, w, channels, data)
}
