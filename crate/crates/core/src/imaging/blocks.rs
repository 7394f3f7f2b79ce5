use super::ImagePlane;
use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 16;

/// One square block of the padded image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

/// Raster-ordered tiling of a padded image into `block_size` squares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// Original (unpadded) dimensions.
    pub height: usize,
    pub width: usize,
    blocks: Vec<Block>,
}

impl BlockGrid {
    pub fn new(height: usize, width: usize, block_size: usize) -> Result<Self> {
        if block_size < 4 {
            return Err(Error::InvalidArgument(format!("block size {block_size} < 4")));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        let rows = height.div_ceil(block_size);
        let cols = width.div_ceil(block_size);
        let blocks = (0..rows * cols)
            .map(|index| {
                let (row, col) = (index / cols, index % cols);
                Block {
                    index,
                    row,
                    col,
                    y0: row * block_size,
                    x0: col * block_size,
                    size: block_size,
                }
            })
            .collect();
        Ok(Self {
            block_size,
            rows,
            cols,
            height,
            width,
            blocks,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn padded_height(&self) -> usize {
        self.rows * self.block_size
    }

    pub fn padded_width(&self) -> usize {
        self.cols * self.block_size
    }

    /// Block coordinates normalised to `[0, 1]`; a single row/column maps to 0.
    pub fn normalized_coords(&self, b: usize) -> (f64, f64) {
        let blk = &self.blocks[b];
        let norm = |v: usize, n: usize| {
            if n > 1 {
                v as f64 / (n - 1) as f64
            } else {
                0.0
            }
        };
        (norm(blk.row, self.rows), norm(blk.col, self.cols))
    }
}

/// Padded image and its block grid.
#[derive(Clone, Debug)]
pub struct Partition {
    pub grid: BlockGrid,
    pub padded: ImagePlane,
}

/// Replicate-pad `image` to block multiples and tile it in raster order.
pub fn partition(image: &ImagePlane, block_size: usize) -> Result<Partition> {
    let grid = BlockGrid::new(image.height(), image.width(), block_size)?;
    let padded = image.pad_replicate(grid.padded_height(), grid.padded_width());
    Ok(Partition { grid, padded })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_counts() {
        for (h, w, b) in [(64, 64, 16), (60, 60, 16), (16, 16, 1), (17, 33, 6)] {
            let img = ImagePlane::filled(h, w, 0.5).unwrap();
            let p = partition(&img, 16).unwrap();
            assert_eq!(p.grid.len(), b, "{h}x{w}");
        }
        let p = partition(&ImagePlane::filled(60, 60, 0.5).unwrap(), 16).unwrap();
        assert_eq!((p.padded.height(), p.padded.width()), (64, 64));
    }

    #[test]
    fn single_block_covers_image() {
        let p = partition(&ImagePlane::filled(16, 16, 0.1).unwrap(), 16).unwrap();
        assert_eq!(
            p.grid.blocks()[0],
            Block {
                index: 0,
                row: 0,
                col: 0,
                y0: 0,
                x0: 0,
                size: 16
            }
        );
    }

    #[test]
    fn tiny_blocks_rejected() {
        assert!(BlockGrid::new(8, 8, 3).is_err());
    }

    #[test]
    fn tiles_exactly_without_overlap() {
        let grid = BlockGrid::new(37, 50, 8).unwrap();
        let (ph, pw) = (grid.padded_height(), grid.padded_width());
        let mut cover = vec![0u8; ph * pw];
        for b in grid.blocks() {
            for y in b.y0..b.y0 + b.size {
                for x in b.x0..b.x0 + b.size {
                    cover[y * pw + x] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c == 1));
        let idx: Vec<usize> = grid.blocks().iter().map(|b| b.index).collect();
        assert_eq!(idx, (0..grid.len()).collect::<Vec<_>>());
    }

    #[test]
    fn replicate_padding_copies_edges() {
        let data: Vec<f64> = (0..5 * 3 * 3).map(|i| (i % 7) as f64 / 7.0).collect();
        let img = ImagePlane::new(5, 3, data).unwrap();
        let p = partition(&img, 4).unwrap();
        assert_eq!(p.padded.get(7, 3, 1), img.get(4, 2, 1));
        assert_eq!(p.padded.get(2, 3, 0), img.get(2, 2, 0));
    }

    #[test]
    fn coordinate_endpoints() {
        let grid = BlockGrid::new(64, 64, 16).unwrap();
        assert_eq!(grid.normalized_coords(0), (0.0, 0.0));
        assert_eq!(grid.normalized_coords(15), (1.0, 1.0));
    }
}
