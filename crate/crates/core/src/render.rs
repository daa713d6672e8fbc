//! Frame rasters for display: raw grayscale or a label-tinted overlay.

use crate::model::{SegmentMap, Volume};

/// Overlay colours indexed by `label - 1`, cycling for larger labels.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn label_colour(label: u8) -> Option<[u8; 3]> {
    (label > 0).then(|| PALETTE[(label as usize - 1) % PALETTE.len()])
}

/// `0.6 * base + 0.4 * tint`, rounded to nearest.
pub fn blend(base: u8, tint: u8) -> u8 {
    ((3 * base as u32 + 2 * tint as u32 + 2) / 5) as u8
}

/// RGB triples for frame `f`; labelled pixels are tinted when `segmap` is given.
pub fn frame_rgb(volume: &Volume, segmap: Option<&SegmentMap>, f: usize) -> Option<Vec<u8>> {
    if f >= volume.dims().frames {
        return None;
    }
    let pixels = volume.frame(f);
    let labels = segmap.map(|m| m.frame(f));
    let mut out = Vec::with_capacity(pixels.len() * 3);
    for (i, &g) in pixels.iter().enumerate() {
        match labels.and_then(|l| label_colour(l[i])) {
            Some(c) => out.extend(c.map(|t| blend(g, t))),
            None => out.extend([g, g, g]),
        }
    }
    Some(out)
}

/// Same as [`frame_rgb`] with an opaque alpha channel.
pub fn frame_rgba(volume: &Volume, segmap: Option<&SegmentMap>, f: usize) -> Option<Vec<u8>> {
    let rgb = frame_rgb(volume, segmap, f)?;
    Some(rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
}

fn encode(width: usize, height: usize, colour: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(colour);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().expect("in-memory png header");
    w.write_image_data(data).expect("in-memory png data");
    w.finish().expect("in-memory png finish");
    out
}

/// PNG of frame `f`: grayscale, or RGB with tinted labels when `overlay` is set.
pub fn frame_png(volume: &Volume, segmap: Option<&SegmentMap>, f: usize, overlay: bool) -> Option<Vec<u8>> {
    let d = volume.dims();
    if f >= d.frames {
        return None;
    }
    Some(match (overlay, segmap) {
        (true, Some(m)) => encode(d.width, d.height, png::ColorType::Rgb, &frame_rgb(volume, Some(m), f)?),
        _ => encode(d.width, d.height, png::ColorType::Grayscale, volume.frame(f)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;

    fn sample() -> (Volume, SegmentMap) {
        let dims = Dims::new(2, 8, 8).unwrap();
        let px: Vec<u8> = (0..dims.len()).map(|i| (i % 251) as u8).collect();
        let mut lb = vec![0u8; dims.len()];
        lb[3] = 1;
        lb[10] = 2;
        lb[64 + 5] = 3;
        (Volume::new("v", dims, px).unwrap(), SegmentMap::new(dims, lb).unwrap())
    }

    fn decode(bytes: &[u8]) -> (png::ColorType, Vec<u8>) {
        let mut r = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size().unwrap()];
        let info = r.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (info.color_type, buf)
    }

    #[test]
    fn blend_endpoints() {
        assert_eq!(blend(0, 0), 0);
        assert_eq!(blend(255, 255), 255);
        assert_eq!(blend(100, 200), 140);
        assert_eq!(blend(0, 255), 102);
    }

    #[test]
    fn plain_frame_is_raw_pixels() {
        let (v, m) = sample();
        let (ct, data) = decode(&frame_png(&v, Some(&m), 1, false).unwrap());
        assert_eq!(ct, png::ColorType::Grayscale);
        assert_eq!(data, v.frame(1));
    }

    #[test]
    fn overlay_tints_only_labelled_pixels() {
        let (v, m) = sample();
        let (ct, data) = decode(&frame_png(&v, Some(&m), 0, true).unwrap());
        assert_eq!(ct, png::ColorType::Rgb);
        for (i, px) in data.chunks_exact(3).enumerate() {
            let g = v.frame(0)[i];
            match m.frame(0)[i] {
                0 => assert_eq!(px, [g, g, g]),
                l => assert_eq!(px, label_colour(l).unwrap().map(|c| blend(g, c))),
            }
        }
    }

    #[test]
    fn out_of_range_frame() {
        let (v, m) = sample();
        assert!(frame_png(&v, Some(&m), 2, true).is_none());
        assert!(frame_rgba(&v, None, 5).is_none());
    }

    #[test]
    fn bytes_are_deterministic() {
        let (v, m) = sample();
        assert_eq!(frame_png(&v, Some(&m), 0, true), frame_png(&v, Some(&m), 0, true));
        assert_eq!(frame_rgba(&v, Some(&m), 0).unwrap().len(), 64 * 4);
    }
}
