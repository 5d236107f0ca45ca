//! Binary portable graymap (PGM, `P5`) export of 2D maps.

use std::path::Path;

use crate::error::CliError;

/// Linear window `[lo, hi] → [0, 255]`, clamped.
pub fn window_value(v: f64, lo: f64, hi: f64) -> u8 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// PGM bytes of an `ny × nz` map (rows are `y`). Pixels outside `mask`
/// are black.
pub fn pgm_bytes(map: &[f64], ny: usize, nz: usize, mask: Option<&[bool]>, window: (f64, f64)) -> Result<Vec<u8>, CliError> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(CliError::Config(format!("image window needs lo < hi, got ({lo}, {hi})")));
    }
    if map.len() != ny * nz || mask.is_some_and(|m| m.len() != map.len()) {
        return Err(CliError::Config("image map does not match its size".into()));
    }
    let mut out = format!("P5\n{nz} {ny}\n255\n").into_bytes();
    out.extend(map.iter().enumerate().map(|(i, &v)| match mask {
        Some(m) if !m[i] => 0,
        _ => window_value(v, lo, hi),
    }));
    Ok(out)
}

pub fn export_image(
    map: &[f64],
    ny: usize,
    nz: usize,
    mask: Option<&[bool]>,
    path: &Path,
    window: (f64, f64),
) -> Result<(), CliError> {
    let bytes = pgm_bytes(map, ny, nz, mask, window)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixels(bytes: &[u8]) -> &[u8] {
        let mut newlines = 0;
        let start = bytes.iter().position(|&b| {
            newlines += (b == b'\n') as usize;
            newlines == 3
        });
        &bytes[start.unwrap() + 1..]
    }

    #[test]
    fn constant_maps_at_window_edges() {
        let lo = pgm_bytes(&[2.0; 12], 3, 4, None, (2.0, 5.0)).unwrap();
        assert!(lo.starts_with(b"P5\n4 3\n255\n"));
        assert!(pixels(&lo).iter().all(|&p| p == 0));
        let hi = pgm_bytes(&[5.0; 12], 3, 4, None, (2.0, 5.0)).unwrap();
        assert!(pixels(&hi).iter().all(|&p| p == 255));
    }

    #[test]
    fn ramp_follows_scalar_windowing() {
        let ramp: Vec<f64> = (0..20).map(|i| -1.0 + 0.2 * i as f64).collect();
        let bytes = pgm_bytes(&ramp, 4, 5, None, (0.0, 2.0)).unwrap();
        let px = pixels(&bytes);
        assert_eq!(px.len(), 20);
        for (i, &p) in px.iter().enumerate() {
            let oracle = (((ramp[i] - 0.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8;
            assert_eq!(p, oracle);
        }
        assert!(px.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn masked_pixels_are_black_and_bad_windows_fail() {
        let mask = [true, false, true, false];
        let bytes = pgm_bytes(&[9.0; 4], 2, 2, Some(&mask), (0.0, 1.0)).unwrap();
        assert_eq!(pixels(&bytes), [255, 0, 255, 0]);
        assert!(pgm_bytes(&[0.0; 4], 2, 2, None, (1.0, 1.0)).is_err());
    }
}
