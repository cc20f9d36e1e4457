//! Whole-run data: the world plus every sample set a run needs, generated
//! from one [`RunConfig`] and stored under one directory.
//!
//! Layout: `world.json`, then `train/`, `held_out/`, `map/` and `queries/`,
//! each a dataset directory.

use std::fs;
use std::path::Path;

use crate::config::{stage, RunConfig};
use crate::dataset::{
    generate_dataset, sample_map_and_queries, Dataset, DatasetMeta, Sample, DATASET_VERSION,
};
use crate::error::{Error, Result};
use crate::world::World;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub world: World,
    pub train: Dataset,
    pub held_out: Dataset,
    pub map: Dataset,
    pub queries: Dataset,
}

const PARTS: [&str; 4] = ["train", "held_out", "map", "queries"];

pub fn build_corpus(config: &RunConfig) -> Result<Corpus> {
    config.validate()?;
    let world = World::generate(&config.world_config())?;
    build_corpus_in(config, world)
}

/// Samples every dataset from an existing world.
pub fn build_corpus_in(config: &RunConfig, world: World) -> Result<Corpus> {
    config.validate()?;
    let render = config.render;
    let protocol = &config.data.protocol;
    let wrap = |label: &str, seed: u64, samples: Vec<Sample>| Dataset {
        meta: DatasetMeta {
            version: DATASET_VERSION,
            seed,
            config_hash: config.hash(),
            render,
            description: label.into(),
        },
        samples,
    };
    let seed = config.seed_for(stage::TRAIN_DATA);
    let train = wrap(
        "train",
        seed,
        generate_dataset(&world, config.data.exemplars, protocol, &render, seed)?,
    );
    let seed = config.seed_for(stage::HELD_OUT);
    let held = generate_dataset(
        &world,
        config.data.held_out_exemplars.max(1),
        protocol,
        &render,
        seed,
    )?;
    let held_out = wrap("held_out", seed, held);
    let seed = config.seed_for(stage::MAP);
    let (map, queries) = sample_map_and_queries(
        &world,
        config.data.map_spacing,
        config.data.queries,
        &render,
        seed,
    )?;
    Ok(Corpus {
        world,
        train,
        held_out,
        map: wrap("map", seed, map),
        queries: wrap("queries", seed, queries),
    })
}

impl World {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("world serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<World> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.world.save(&dir.join("world.json"))?;
        for (name, set) in PARTS
            .iter()
            .zip([&self.train, &self.held_out, &self.map, &self.queries])
        {
            set.save(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let world = World::load(&dir.join("world.json"))?;
        let mut sets = PARTS.iter().map(|name| Dataset::load(&dir.join(name)));
        let mut next = || sets.next().expect("four parts");
        Ok(Corpus {
            world,
            train: next()?,
            held_out: next()?,
            map: next()?,
            queries: next()?,
        })
    }
}
