use crate::error::{Error, Result};

/// Pixel label excluded from every loss term and from evaluation.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Data(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// One character per pixel: `.` for background, digits for classes 1-9,
    /// `+` above that and `#` for ignored pixels.
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity(self.labels.len() + self.height);
        for row in self.labels.chunks(self.width.max(1)) {
            out.extend(row.iter().map(|&l| match l {
                0 => '.',
                IGNORE_LABEL => '#',
                1..=9 => char::from(b'0' + l),
                _ => '+',
            }));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fails if any non-ignored label is outside `0..classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= classes)
        {
            Some(&l) => Err(Error::Data(format!("label {l} out of range for {classes} classes"))),
            None => Ok(()),
        }
    }

    /// Classes with at least one pixel.
    pub fn present(&self, classes: usize) -> Vec<bool> {
        let mut seen = vec![false; classes];
        for &l in &self.labels {
            if (l as usize) < classes {
                seen[l as usize] = true;
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_rendering() {
        let m = LabelMap::new(2, 3, vec![0, 1, 9, 12, IGNORE_LABEL, 0]).unwrap();
        assert_eq!(m.to_ascii(), ".19\n+#.\n");
    }

    #[test]
    fn wrong_length_is_data_error() {
        assert_eq!(LabelMap::new(2, 2, vec![0; 3]).unwrap_err().kind(), "data");
    }
}
