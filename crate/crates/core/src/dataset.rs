//! Data access abstraction: the sampler and engine only need image
//! metadata plus a way to load one (volume, labels) pair.

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

#[derive(Clone, Debug)]
pub struct ImageInfo {
    pub id: String,
    pub institution: String,
}

/// Read-only source of labelled volumes. Implementations must return
/// classes, institutions and images in a stable canonical order.
pub trait DataSource: Sync {
    fn classes(&self) -> &[String];
    fn institutions(&self) -> &[String];
    fn images(&self) -> &[ImageInfo];
    fn load(&self, id: &str) -> Result<(Volume, LabelMap)>;

    fn institution_of(&self, id: &str) -> Result<&str> {
        self.images()
            .iter()
            .find(|im| im.id == id)
            .map(|im| im.institution.as_str())
            .ok_or_else(|| Error::DataSource(format!("unknown image id '{id}'")))
    }

    fn ids_of_institution(&self, institution: &str) -> Vec<String> {
        self.images()
            .iter()
            .filter(|im| im.institution == institution)
            .map(|im| im.id.clone())
            .collect()
    }
}

/// Fully in-memory source (synthetic benchmarks, tests).
pub struct MemorySource {
    classes: Vec<String>,
    institutions: Vec<String>,
    images: Vec<ImageInfo>,
    items: Vec<(Volume, LabelMap)>,
}

impl MemorySource {
    pub fn new(classes: Vec<String>, institutions: Vec<String>) -> Self {
        Self {
            classes,
            institutions,
            images: Vec::new(),
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, volume: Volume, labels: LabelMap) -> Result<()> {
        if !self.institutions.contains(&volume.institution) {
            return Err(Error::Catalog(format!(
                "image '{}' references undeclared institution '{}'",
                volume.id, volume.institution
            )));
        }
        labels.validate_against(&volume, &self.classes)?;
        self.images.push(ImageInfo {
            id: volume.id.clone(),
            institution: volume.institution.clone(),
        });
        self.items.push((volume, labels));
        Ok(())
    }
}

impl DataSource for MemorySource {
    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn institutions(&self) -> &[String] {
        &self.institutions
    }

    fn images(&self) -> &[ImageInfo] {
        &self.images
    }

    fn load(&self, id: &str) -> Result<(Volume, LabelMap)> {
        self.images
            .iter()
            .position(|im| im.id == id)
            .map(|i| self.items[i].clone())
            .ok_or_else(|| Error::DataSource(format!("unknown image id '{id}'")))
    }
}
