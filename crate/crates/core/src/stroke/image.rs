use std::path::Path;

use super::Stroke;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(
                "image",
                format!("{} pixels", width * height),
                format!("{}", pixels.len()),
            ));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// Clockwise neighbor offsets `(drow, dcol)` starting from west, with rows
/// growing downward.
const MOORE: [(isize, isize); 8] = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];

fn largest_component(fg: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; fg.len()];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        label[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for (dr, dc) in MOORE {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if fg[q] && label[q] == usize::MAX {
                    label[q] = next;
                    stack.push(q);
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    let keep = best.map_or(usize::MAX, |(l, _)| l);
    label.iter().map(|&l| l == keep).collect()
}

/// Outer boundary of the largest 8-connected foreground component, traced
/// clockwise from its topmost-leftmost pixel by Moore-neighbor following.
///
/// Pixels with value `>= threshold` are foreground. Points are returned as
/// `(col, height - 1 - row)` so that y grows upward.
pub fn image_to_stroke(img: &GrayImage, threshold: u8) -> Result<Stroke> {
    let (w, h) = (img.width, img.height);
    let fg: Vec<bool> = img.pixels.iter().map(|&p| p >= threshold).collect();
    if !fg.iter().any(|&f| f) {
        return Err(Error::invalid("image_to_stroke", "image has no foreground pixel"));
    }
    let comp = largest_component(&fg, w, h);
    let inside =
        |r: isize, c: isize| r >= 0 && c >= 0 && r < h as isize && c < w as isize && comp[r as usize * w + c as usize];
    let start_idx = comp.iter().position(|&f| f).expect("nonempty component");
    let start = ((start_idx / w) as isize, (start_idx % w) as isize);

    // Scan the neighbors of `cur` clockwise, beginning just after the
    // direction `from`; returns the first foreground neighbor and the
    // direction it lies in.
    let scan = |cur: (isize, isize), from: usize| -> Option<(usize, (isize, isize))> {
        (1..=8).map(|i| (from + i) % 8).find_map(|d| {
            let (dr, dc) = MOORE[d];
            let n = (cur.0 + dr, cur.1 + dc);
            inside(n.0, n.1).then_some((d, n))
        })
    };

    // The pixel west of the start is background, so scanning starts there.
    let Some((first_dir, first)) = scan(start, 0) else {
        return Err(Error::invalid("image_to_stroke", "boundary has fewer than two points"));
    };
    let mut boundary = vec![start];
    let (mut cur, mut dir) = (first, first_dir);
    loop {
        // Resume the clockwise scan just after the pixel we arrived from.
        let back = (dir + 4) % 8;
        let (d, n) = scan(cur, back).expect("connected pixel has a neighbor");
        if cur == start && n == first {
            break;
        }
        boundary.push(cur);
        cur = n;
        dir = d;
        if boundary.len() > 4 * w * h {
            return Err(Error::Numerical("contour trace did not close".into()));
        }
    }
    let pts = boundary
        .into_iter()
        .map(|(r, c)| [c as f64, (h as isize - 1 - r) as f64])
        .collect();
    Stroke::new(pts)
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Binary {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg: "file ends inside the header".into(),
        })
}

fn check_magic(bytes: &[u8], path: &Path, want: u32) -> Result<()> {
    let got = read_u32(bytes, 0, path)?;
    if got != want {
        return Err(Error::Binary {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad magic 0x{got:08x}, expected 0x{want:08x}"),
        });
    }
    Ok(())
}

fn need(bytes: &[u8], end: usize, path: &Path) -> Result<()> {
    if bytes.len() < end {
        return Err(Error::Binary {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("file truncated, expected {end} bytes"),
        });
    }
    Ok(())
}

/// Reads an IDX image file and its label file into `(image, label)` pairs.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Vec<(GrayImage, u8)>> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    check_magic(&ib, images, IDX_IMAGES_MAGIC)?;
    check_magic(&lb, labels, IDX_LABELS_MAGIC)?;
    let n = read_u32(&ib, 4, images)? as usize;
    let rows = read_u32(&ib, 8, images)? as usize;
    let cols = read_u32(&ib, 12, images)? as usize;
    let nl = read_u32(&lb, 4, labels)? as usize;
    if n != nl {
        return Err(Error::Dataset(format!(
            "{} holds {n} images but {} holds {nl} labels",
            images.display(),
            labels.display()
        )));
    }
    need(&ib, 16 + n * rows * cols, images)?;
    need(&lb, 8 + n, labels)?;
    let size = rows * cols;
    (0..n)
        .map(|i| {
            let px = ib[16 + i * size..16 + (i + 1) * size].to_vec();
            Ok((GrayImage::new(cols, rows, px)?, lb[8 + i]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(rows: &[&str]) -> GrayImage {
        let h = rows.len();
        let w = rows[0].len();
        let px = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| if b == b'#' { 255 } else { 0 }))
            .collect();
        GrayImage::new(w, h, px).unwrap()
    }

    fn is_neighbor(a: [f64; 2], b: [f64; 2]) -> bool {
        let (dx, dy) = ((a[0] - b[0]).abs(), (a[1] - b[1]).abs());
        dx <= 1.0 && dy <= 1.0 && (dx, dy) != (0.0, 0.0)
    }

    #[test]
    fn single_pixel_is_degenerate() {
        assert!(image_to_stroke(&img(&["...", ".#.", "..."]), 128).is_err());
        assert!(image_to_stroke(&img(&["...", "..."]), 128).is_err());
    }

    #[test]
    fn two_by_two_block() {
        let s = image_to_stroke(&img(&["....", ".##.", ".##.", "...."]), 128).unwrap();
        assert_eq!(s.points(), &[[1.0, 2.0], [2.0, 2.0], [2.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn three_by_three_block() {
        let s = image_to_stroke(&img(&["###", "###", "###"]), 128).unwrap();
        assert_eq!(s.len(), 8);
        let want = [
            [0.0, 2.0],
            [1.0, 2.0],
            [2.0, 2.0],
            [2.0, 1.0],
            [2.0, 0.0],
            [1.0, 0.0],
            [0.0, 0.0],
            [0.0, 1.0],
        ];
        assert_eq!(s.points(), &want);
    }

    #[test]
    fn traces_largest_component_as_closed_walk() {
        let s = image_to_stroke(
            &img(&["#.......", "...##...", "..####..", "..#..##.", "...###..", "........"]),
            128,
        )
        .unwrap();
        let p = s.points();
        assert!(p.iter().all(|q| q[0] >= 2.0));
        for w in p.windows(2) {
            assert!(is_neighbor(w[0], w[1]), "{w:?}");
        }
        assert!(is_neighbor(p[0], *p.last().unwrap()));
    }

    #[test]
    fn thin_line_walks_back() {
        let s = image_to_stroke(&img(&["###"]), 128).unwrap();
        assert_eq!(s.points(), &[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [1.0, 0.0]]);
    }

    fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn idx_parsing_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        std::fs::write(&ip, idx_bytes(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0, 1, 2, 3, 4, 5, 6, 7])).unwrap();
        std::fs::write(&lp, idx_bytes(IDX_LABELS_MAGIC, &[2], &[3, 9])).unwrap();
        let items = load_idx(&ip, &lp).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[1].0.pixels, vec![4, 5, 6, 7]);
        assert_eq!(items[1].1, 9);

        std::fs::write(&ip, idx_bytes(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0, 1, 2, 3, 4])).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Binary { offset, .. }) => assert_eq!(offset, 21),
            other => panic!("{other:?}"),
        }
        std::fs::write(&ip, idx_bytes(0x0000_0801, &[2, 2, 2], &[0; 8])).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("0x00000803"), "{err}");
        std::fs::write(&ip, idx_bytes(IDX_IMAGES_MAGIC, &[3, 2, 2], &[0; 12])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Dataset(_))));
        std::fs::write(&ip, [0u8, 0, 8]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Binary { offset: 0, .. })));
    }
}
