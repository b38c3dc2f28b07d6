//! One editing session: a source image, the current model and the edit
//! journal that leads to it from the base model.

use glut_core::editing::{apply_edit, residual};
use glut_core::glut::{apply_to_image, bake_to_cube};
use glut_core::lut_io::{encode_png, write_cube, BitDepth};
use glut_core::{CglutModel, EditConstraint, EditError, EditJournal, GlutModel, Image, ModelFile, Rgb};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Which style of a conditional model the session edits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StyleSelection {
    Style { index: usize },
    Blend { l1: usize, l2: usize, alpha: f64 },
}

impl StyleSelection {
    fn materialize(self, model: &CglutModel) -> Result<GlutModel, String> {
        match self {
            StyleSelection::Style { index } => model.materialize(index),
            StyleSelection::Blend { l1, l2, alpha } => model.blend(l1, l2, alpha),
        }
        .map_err(|e| e.to_string())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Edit(#[from] EditError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EditOutcome {
    pub residual_before: [f64; 3],
    pub residual_after: [f64; 3],
    pub m: f64,
    pub touched: Vec<usize>,
    pub revision: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PixelProbe {
    pub x: usize,
    pub y: usize,
    pub source: [f64; 3],
    pub current: [f64; 3],
    pub revision: u64,
}

pub struct Session {
    base: GlutModel,
    model: GlutModel,
    cglut: Option<CglutModel>,
    selection: Option<StyleSelection>,
    source: Arc<Image>,
    journal: EditJournal,
    revision: u64,
    threads: usize,
    /// `(revision, long edge, png)`; only the current revision is kept.
    previews: Vec<(u64, usize, Arc<Vec<u8>>)>,
    scaled: Vec<(usize, Arc<Image>)>,
}

impl Session {
    /// Builds a session from an uploaded model. Conditional models need a
    /// style selection and default to style 0.
    pub fn new(
        source: Image,
        file: ModelFile,
        selection: Option<StyleSelection>,
        threads: usize,
    ) -> Result<Self, SessionError> {
        let (base, cglut, selection) = match file {
            ModelFile::Glut(m) => {
                if selection.is_some() {
                    return Err(SessionError::Invalid("style selection needs a conditional model".into()));
                }
                (m, None, None)
            }
            ModelFile::Cglut(c) => {
                let sel = selection.unwrap_or(StyleSelection::Style { index: 0 });
                let m = sel.materialize(&c).map_err(SessionError::Invalid)?;
                (m, Some(c), Some(sel))
            }
        };
        Ok(Session {
            model: base.clone(),
            base,
            cglut,
            selection,
            source: Arc::new(source),
            journal: EditJournal::default(),
            revision: 0,
            threads: threads.max(1),
            previews: Vec::new(),
            scaled: Vec::new(),
        })
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn model(&self) -> &GlutModel {
        &self.model
    }

    pub fn base(&self) -> &GlutModel {
        &self.base
    }

    pub fn journal(&self) -> &EditJournal {
        &self.journal
    }

    pub fn source(&self) -> &Image {
        &self.source
    }

    pub fn styles(&self) -> Option<usize> {
        self.cglut.as_ref().map(CglutModel::styles)
    }

    pub fn selection(&self) -> Option<StyleSelection> {
        self.selection
    }

    fn bump(&mut self) {
        self.revision += 1;
        self.previews.clear();
    }

    /// Applies one edit. A zero-strength edit is validated and reported but
    /// leaves the model and revision untouched.
    pub fn edit(&mut self, c: &EditConstraint) -> Result<EditOutcome, SessionError> {
        let before = residual(&self.model, c.c_in, c.c_out);
        let record = if c.strength == 0.0 {
            apply_edit(&mut self.model.clone(), c)?
        } else {
            let r = self.journal.apply(&mut self.model, c)?.clone();
            self.bump();
            r
        };
        Ok(EditOutcome {
            residual_before: before,
            residual_after: residual(&self.model, c.c_in, c.c_out),
            m: record.movement,
            touched: record.touched,
            revision: self.revision,
        })
    }

    pub fn undo(&mut self) -> Result<u64, SessionError> {
        if self.journal.is_empty() {
            return Err(SessionError::Conflict("nothing to undo".into()));
        }
        self.journal.undo_last(&mut self.model)?;
        self.bump();
        Ok(self.revision)
    }

    /// Switches the base model to a blend of two styles and replays the
    /// journal on top of it. On failure the session is unchanged.
    pub fn blend(&mut self, l1: usize, l2: usize, alpha: f64) -> Result<u64, SessionError> {
        let Some(cglut) = &self.cglut else {
            return Err(SessionError::Conflict("session model is not conditional".into()));
        };
        let sel = StyleSelection::Blend { l1, l2, alpha };
        let base = sel.materialize(cglut).map_err(SessionError::Invalid)?;
        let mut model = base.clone();
        let journal = self.journal.replay(&mut model)?;
        self.base = base;
        self.model = model;
        self.journal = journal;
        self.selection = Some(sel);
        self.bump();
        Ok(self.revision)
    }

    pub fn pixel(&self, x: usize, y: usize) -> Result<PixelProbe, SessionError> {
        if x >= self.source.width || y >= self.source.height {
            return Err(SessionError::Invalid(format!(
                "pixel ({x}, {y}) outside {}x{} image",
                self.source.width, self.source.height
            )));
        }
        let s = self.source.pixel(x, y);
        Ok(PixelProbe {
            x,
            y,
            source: s.to_array(),
            current: self.model.evaluate(s).to_array(),
            revision: self.revision,
        })
    }

    fn scaled_source(&mut self, edge: usize) -> Arc<Image> {
        if let Some((_, img)) = self.scaled.iter().find(|(e, _)| *e == edge) {
            return img.clone();
        }
        let img = Arc::new(self.source.downscale_to(edge));
        if self.scaled.len() >= 4 {
            self.scaled.remove(0);
        }
        self.scaled.push((edge, img.clone()));
        img
    }

    /// PNG preview of the current revision with the long edge at most
    /// `edge` pixels.
    pub fn preview(&mut self, edge: usize) -> Arc<Vec<u8>> {
        if let Some((_, _, png)) = self.previews.iter().find(|(r, e, _)| *r == self.revision && *e == edge) {
            return png.clone();
        }
        let src = self.scaled_source(edge);
        let out = apply_to_image(&self.model, &src, self.threads);
        let png = Arc::new(encode_png(&out, BitDepth::Eight).expect("8-bit png encoding"));
        self.previews.push((self.revision, edge, png.clone()));
        png
    }

    pub fn export_cube(&self, size: usize) -> Vec<u8> {
        write_cube(&bake_to_cube(&self.model, size))
    }

    pub fn export_model(&self) -> Vec<u8> {
        ModelFile::Glut(self.model.clone()).to_bytes()
    }
}

/// Color triplet from the wire, checked to lie in `[0,1]`.
pub fn color_from_wire(c: [f64; 3]) -> Result<Rgb, SessionError> {
    if c.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(Rgb::new(c[0], c[1], c[2]))
    } else {
        Err(SessionError::Invalid(format!("color {c:?} outside [0, 1]")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Image {
        Image::new(
            3,
            2,
            (0..6).map(|i| Rgb::new(i as f64 / 5.0, 0.5, 1.0 - i as f64 / 5.0)).collect(),
        )
    }

    #[test]
    fn zero_strength_is_a_dry_run() {
        let mut s = Session::new(image(), ModelFile::Glut(GlutModel::identity(8)), None, 1).unwrap();
        let c = EditConstraint::new(Rgb::new(0.2, 0.4, 0.6), Rgb::new(0.3, 0.4, 0.6), 2, 0.0);
        let out = s.edit(&c).unwrap();
        assert_eq!(out.revision, 0);
        assert_eq!(out.residual_after, out.residual_before);
        assert!(s.journal().is_empty());
    }

    #[test]
    fn glut_rejects_style_selection() {
        let r = Session::new(
            image(),
            ModelFile::Glut(GlutModel::identity(2)),
            Some(StyleSelection::Style { index: 0 }),
            1,
        );
        assert!(matches!(r, Err(SessionError::Invalid(_))));
    }

    #[test]
    fn preview_is_cached_per_revision() {
        let mut s = Session::new(image(), ModelFile::Glut(GlutModel::identity(8)), None, 1).unwrap();
        let a = s.preview(1024);
        assert!(Arc::ptr_eq(&a, &s.preview(1024)));
        s.edit(&EditConstraint::new(Rgb::new(0.2, 0.5, 0.8), Rgb::new(0.6, 0.5, 0.8), 4, 1.0))
            .unwrap();
        assert!(!Arc::ptr_eq(&a, &s.preview(1024)));
    }
}
