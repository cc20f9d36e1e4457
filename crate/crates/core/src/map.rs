//! Exemplar map: stored features with poses, closest-place queries by
//! feature distance, and the map file.

use std::collections::HashSet;
use std::path::Path;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::io::{self, Provenance, Reader, Writer};
use crate::model::{feature_distance, FeatureMap, Model};
use crate::tensor::Tensor;
use crate::world::Point;

pub const MAP_VERSION: u32 = 1;
const MAP_MAGIC: &[u8; 4] = b"OMAP";

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarRecord {
    pub id: u32,
    pub room: usize,
    pub position: Point,
    pub theta: f64,
    pub rotation_bin: usize,
    /// `w × d`
    pub feature: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapIndex {
    pub model_hash: String,
    pub provenance: Provenance,
    /// Whether features are compared under column shifts.
    pub roll_branching: bool,
    pub records: Vec<ExemplarRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub id: u32,
    pub distance: f64,
    pub r_hat: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub best: u32,
    pub distance: f64,
    pub r_hat: usize,
    /// Every record, closest first; equal distances keep id order.
    pub ranking: Vec<Ranked>,
}

/// One forward pass per exemplar.
pub fn build_map(model: &Model, exemplars: &[Sample]) -> Result<MapIndex> {
    if exemplars.is_empty() {
        return Err(Error::Empty("exemplar list"));
    }
    let mut records = Vec::with_capacity(exemplars.len());
    for s in exemplars {
        records.push(ExemplarRecord {
            id: s.record.id,
            room: s.record.room,
            position: s.position(),
            theta: s.record.theta,
            rotation_bin: s.record.rotation_bin,
            feature: model.forward(&s.image.pixels)?.values,
        });
    }
    let mut map = MapIndex::new(
        model.hash().to_string(),
        model.config().roll_branching,
        records,
    )?;
    map.provenance = model.provenance().clone();
    Ok(map)
}

impl MapIndex {
    pub fn new(
        model_hash: String,
        roll_branching: bool,
        records: Vec<ExemplarRecord>,
    ) -> Result<MapIndex> {
        let mut seen = HashSet::new();
        if let Some(dup) = records.iter().find(|r| !seen.insert(r.id)) {
            return Err(Error::invalid(format!("duplicate exemplar id {}", dup.id)));
        }
        if let Some(first) = records.first() {
            let shape = first.feature.shape();
            if shape.len() != 2 || records.iter().any(|r| r.feature.shape() != shape) {
                return Err(Error::invalid("map features must share one w × d shape"));
            }
        }
        Ok(MapIndex {
            model_hash,
            provenance: Provenance::default(),
            roll_branching,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: u32) -> Result<&ExemplarRecord> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or(Error::UnknownId(id))
    }

    pub fn check_model(&self, model_hash: &str) -> Result<()> {
        if model_hash != self.model_hash {
            return Err(Error::ModelHashMismatch {
                map: self.model_hash.clone(),
                model: model_hash.to_string(),
            });
        }
        Ok(())
    }

    /// Linear scan over every record.
    pub fn query(&self, feature: &FeatureMap) -> Result<QueryResult> {
        self.check_model(&feature.model_hash)?;
        if self.records.is_empty() {
            return Err(Error::Empty("map"));
        }
        let mut ranking = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let d = feature_distance(self.roll_branching, &feature.values, &r.feature)?;
            ranking.push(Ranked {
                id: r.id,
                distance: d.d_min,
                r_hat: d.r_hat,
            });
        }
        ranking.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
        let top = &ranking[0];
        Ok(QueryResult {
            best: top.id,
            distance: top.distance,
            r_hat: top.r_hat,
            ranking,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(MAP_MAGIC, MAP_VERSION);
        w.block(self.model_hash.as_bytes());
        w.block(&self.provenance.to_bytes());
        w.u32(self.roll_branching as u32);
        w.u32(self.records.len() as u32);
        for r in &self.records {
            w.u32(r.id);
            w.u32(r.room as u32);
            w.f64(r.position[0]);
            w.f64(r.position[1]);
            w.f64(r.theta);
            w.u32(r.rotation_bin as u32);
            w.u32(r.feature.shape()[0] as u32);
            w.u32(r.feature.shape()[1] as u32);
            w.f32s(r.feature.data().iter().copied());
        }
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<MapIndex> {
        let bytes = io::read(path)?;
        let mut r = Reader::open(path, &bytes, MAP_MAGIC, MAP_VERSION)?;
        let model_hash = String::from_utf8(r.block()?.to_vec())
            .map_err(|_| Error::format(path, "model hash is not text"))?;
        let provenance = Provenance::from_bytes(path, r.block()?)?;
        let roll_branching = r.u32()? != 0;
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.u32()?;
            let room = r.u32()? as usize;
            let position = [r.f64()?, r.f64()?];
            let theta = r.f64()?;
            let rotation_bin = r.u32()? as usize;
            let (w, d) = (r.u32()? as usize, r.u32()? as usize);
            let feature = Tensor::new(vec![w, d], r.f32s(w * d)?)?;
            records.push(ExemplarRecord {
                id,
                room,
                position,
                theta,
                rotation_bin,
                feature,
            });
        }
        r.finish()?;
        let mut map = MapIndex::new(model_hash, roll_branching, records)?;
        map.provenance = provenance;
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(id: u32, rng: &mut ChaCha8Rng) -> ExemplarRecord {
        ExemplarRecord {
            id,
            room: 0,
            position: [id as f64, 0.0],
            theta: 0.0,
            rotation_bin: 0,
            feature: Tensor::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0)),
        }
    }

    fn index(n: u32, seed: u64) -> MapIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = MapIndex::new(
            "h".into(),
            true,
            (0..n).map(|i| record(i, &mut rng)).collect(),
        )
        .unwrap();
        map.provenance = Provenance {
            config_hash: "cfg".into(),
            seed,
        };
        map
    }

    fn feature(values: Tensor<f32>) -> FeatureMap {
        FeatureMap {
            values,
            model_hash: "h".into(),
        }
    }

    #[test]
    fn single_record_always_wins() {
        let map = index(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = feature(Tensor::from_fn(&[4, 3], |_| rng.gen()));
        assert_eq!(map.query(&q).unwrap().best, 0);
    }

    #[test]
    fn own_feature_is_an_exact_hit() {
        let map = index(20, 1);
        let q = feature(map.records[7].feature.clone());
        let res = map.query(&q).unwrap();
        assert_eq!((res.best, res.distance, res.r_hat), (7, 0.0, 0));
    }

    #[test]
    fn ranking_matches_brute_force_sort() {
        let map = index(30, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = feature(Tensor::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0)));
        let res = map.query(&q).unwrap();
        let mut brute: Vec<(f64, u32)> = map
            .records
            .iter()
            .map(|r| {
                let best = (0..4)
                    .map(|k| {
                        let shifted = crate::omni::shift_columns(&q.values, k).unwrap();
                        shifted
                            .data()
                            .iter()
                            .zip(r.feature.data())
                            .map(|(a, b)| ((a - b) as f64).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                (best, r.id)
            })
            .collect();
        brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (got, want) in res.ranking.iter().zip(&brute) {
            assert_eq!(got.id, want.1);
            assert!((got.distance - want.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_go_to_the_lower_id_regardless_of_order() {
        let mut map = index(5, 3);
        map.records[3].feature = map.records[1].feature.clone();
        map.records.reverse();
        let q = feature(map.records[1].feature.clone());
        assert_eq!(map.query(&q).unwrap().best, 1);
    }

    #[test]
    fn hash_mismatch_and_errors() {
        let map = index(3, 4);
        let mut q = feature(map.records[0].feature.clone());
        q.model_hash = "other".into();
        let err = map.query(&q).unwrap_err();
        assert!(err.to_string().contains("model hash mismatch"), "{err}");
        assert!(matches!(map.get(99), Err(Error::UnknownId(99))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dup = vec![record(1, &mut rng), record(1, &mut rng)];
        assert!(MapIndex::new("h".into(), true, dup).is_err());
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let map = index(12, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.omap");
        map.save(&path).unwrap();
        assert_eq!(MapIndex::load(&path).unwrap(), map);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 0x10;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(MapIndex::load(&path), Err(Error::Checksum { .. })));
    }
}
