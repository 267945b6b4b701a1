//! On-disk dataset layout: one JSON index per split, PPM images, PGM masks.
//!
//! ```text
//! <dir>/<split>.json
//! <dir>/<split>/img_<id>.ppm
//! <dir>/<split>/mask_<id>_<k>.pgm
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{Instance, SceneGroundTruth};
use super::vocab::{Category, Color, Vocabulary};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InstanceRecord {
    pub category: Category,
    pub color: Color,
    pub mask_path: String,
    pub area: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneRecord {
    pub id: u64,
    pub image_path: String,
    pub instances: Vec<InstanceRecord>,
    pub caption: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitIndex {
    pub scenes: Vec<SceneRecord>,
}

pub fn write_split(dir: &Path, split: &str, scenes: &[SceneGroundTruth], vocab: &Vocabulary) -> Result<()> {
    let sub = dir.join(split);
    std::fs::create_dir_all(&sub)?;
    let mut records = Vec::with_capacity(scenes.len());
    for s in scenes {
        let image_path = format!("{split}/img_{}.ppm", s.id);
        s.image.write_ppm(&dir.join(&image_path))?;
        let mut instances = Vec::with_capacity(s.instances.len());
        for (k, inst) in s.instances.iter().enumerate() {
            let mask_path = format!("{split}/mask_{}_{k}.pgm", s.id);
            inst.mask.write_pgm(&dir.join(&mask_path))?;
            instances.push(InstanceRecord {
                category: inst.category,
                color: inst.color,
                mask_path,
                area: inst.area,
            });
        }
        records.push(SceneRecord {
            id: s.id,
            image_path,
            instances,
            caption: vocab.detokenize(&s.caption),
        });
    }
    let json = serde_json::to_string_pretty(&SplitIndex { scenes: records })?;
    std::fs::write(dir.join(format!("{split}.json")), json)?;
    Ok(())
}

pub fn read_split(dir: &Path, split: &str, vocab: &Vocabulary) -> Result<Vec<SceneGroundTruth>> {
    let index_path = dir.join(format!("{split}.json"));
    if !index_path.exists() {
        return Err(Error::State(format!("dataset split {} not found", index_path.display())));
    }
    let index: SplitIndex = serde_json::from_slice(&std::fs::read(&index_path)?)?;
    index
        .scenes
        .into_iter()
        .map(|r| {
            let image = Image::read_ppm(&dir.join(&r.image_path))?;
            let instances = r
                .instances
                .into_iter()
                .map(|i| {
                    let mask = Mask::read_pgm(&dir.join(&i.mask_path))?;
                    if mask.area() != i.area {
                        return Err(Error::Format(format!("{}: area {} != recorded {}", i.mask_path, mask.area(), i.area)));
                    }
                    Ok(Instance {
                        category: i.category,
                        color: i.color,
                        mask,
                        area: i.area,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SceneGroundTruth {
                id: r.id,
                image,
                instances,
                caption: vocab.tokenize(&r.caption)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    #[test]
    fn split_round_trips_exactly() {
        let vocab = Vocabulary::standard();
        let scenes: Vec<_> = (0..5).map(|s| generate_scene(s, &SceneConfig::default(), &vocab).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), "val", &scenes, &vocab).unwrap();
        assert_eq!(read_split(dir.path(), "val", &vocab).unwrap(), scenes);
        assert!(matches!(read_split(dir.path(), "test", &vocab), Err(Error::State(_))));
    }
}
