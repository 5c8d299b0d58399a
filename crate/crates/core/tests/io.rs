mod common;

use catfa_core::io::{checkpoint, load_dataset, pgm, read_image, runconfig::RunConfig, tensorfile};
use catfa_core::metrics::Mask;
use catfa_core::model::{Model, ModelConfig};
use catfa_core::train::synth::make_synth_dataset;
use catfa_core::train::trainer::{train, TrainConfig};
use catfa_core::{Error, Tensor};
use proptest::prelude::*;

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 1..=4)
}

proptest! {
    #[test]
    fn tensor_file_round_trip_f64(shape in shape_strategy(), bits in prop::collection::vec(any::<u64>(), 625)) {
        let n: usize = shape.iter().product();
        // arbitrary bit patterns, NaN payloads included
        let t = Tensor::new(&shape, bits[..n].iter().map(|&b| f64::from_bits(b)).collect()).unwrap();
        let back: Tensor<f64> = tensorfile::decode(&tensorfile::encode(&t)).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tensor_file_round_trip_f32(shape in shape_strategy(), bits in prop::collection::vec(any::<u32>(), 625)) {
        let n: usize = shape.iter().product();
        let t = Tensor::new(&shape, bits[..n].iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
        let bytes = tensorfile::encode(&t);
        prop_assert_eq!(bytes.len(), 7 + 4 * shape.len() + 4 * n);
        let back: Tensor<f32> = tensorfile::decode(&bytes).unwrap();
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(tensorfile::encode(&back), bytes);
    }

    #[test]
    fn container_round_trip(sizes in prop::collection::vec(1usize..20, 0..6)) {
        let entries: Vec<(String, Tensor<f64>)> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| (format!("entry.{i}"), Tensor::from_fn(&[n], |j| (i * 100 + j) as f64)))
            .collect();
        let bytes = tensorfile::encode_container(&entries).unwrap();
        prop_assert_eq!(tensorfile::decode_container::<f64>(&bytes).unwrap(), entries);
    }
}

#[test]
fn checkpoint_reload_gives_identical_predictions() {
    let cfg = ModelConfig::tiny(8, 32);
    let (model, mut store) = Model::build::<f32>(&cfg, 2).unwrap();
    let data = make_synth_dataset::<f32>(12, 32, 2).unwrap();
    train(&model, &mut store, &data, &TrainConfig { epochs: 1, batch: 4, ..Default::default() }).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ctfa");
    checkpoint::save(&path, &cfg, &store).unwrap();
    let ck = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.params, store);
    let x = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 37) % 101) as f32 / 50.0 - 1.0);
    let a = model.predict(&store, &x).unwrap();
    let b = ck.model.predict(&ck.params, &x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(checkpoint::encode(&ck.config, &ck.params).unwrap(), std::fs::read(&path).unwrap());

    // wider type loads by widening
    let wide = checkpoint::load::<f64>(&path).unwrap();
    assert_eq!(wide.params, store.cast::<f64>());
}

#[test]
fn checkpoint_rejects_mismatches() {
    let cfg = ModelConfig::tiny(8, 32);
    let (_, store) = Model::build::<f64>(&cfg, 0).unwrap();
    let mut entries: Vec<(String, Tensor<f64>)> =
        store.slots().iter().map(|s| (s.name.clone(), s.value.clone())).collect();
    assert!(checkpoint::decode::<f64>(&tensorfile::encode_container(&entries).unwrap()).is_err());
    entries.insert(0, (checkpoint::CONFIG_ENTRY.into(), Tensor::new(&[24], cfg.to_vec()).unwrap()));
    assert!(checkpoint::decode::<f64>(&tensorfile::encode_container(&entries).unwrap()).is_ok());
    entries.push(("stray".into(), Tensor::zeros(&[1])));
    assert!(checkpoint::decode::<f64>(&tensorfile::encode_container(&entries).unwrap()).is_err());
    entries.pop();
    entries[3].1 = Tensor::zeros(&[1]);
    assert!(checkpoint::decode::<f64>(&tensorfile::encode_container(&entries).unwrap()).is_err());
}

#[test]
fn dataset_directory_and_images() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::create_dir_all(dir.path().join("masks")).unwrap();
    let data = make_synth_dataset::<f32>(3, 32, 1).unwrap();
    for (i, s) in data.iter().enumerate() {
        tensorfile::write(&dir.path().join(format!("images/{i}.ctfa")), &s.image).unwrap();
        pgm::write_mask(&dir.path().join(format!("masks/{i}.pgm")), &Mask::from_tensor(&s.mask).unwrap()).unwrap();
    }
    assert_eq!(load_dataset::<f32>(dir.path()).unwrap(), data);

    let grey = dir.path().join("g.pgm");
    pgm::write_mask(&grey, &Mask::new(1, 2, vec![true, false]).unwrap()).unwrap();
    let img: Tensor<f64> = read_image(&grey).unwrap();
    assert_eq!(img.shape(), &[3, 1, 2]);
    assert_eq!(img.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let bad = dir.path().join("bad.ctfa");
    tensorfile::write(&bad, &Tensor::<f32>::zeros(&[2, 4, 4])).unwrap();
    assert!(read_image::<f32>(&bad).is_err());
    std::fs::remove_file(dir.path().join("masks/1.pgm")).unwrap();
    assert!(load_dataset::<f32>(dir.path()).is_err());
}

#[test]
fn run_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.cfg");
    std::fs::write(&p, "variant=s\nepochs=50\nbatch=8\n").unwrap();
    let rc = RunConfig::load(&p).unwrap();
    assert_eq!(rc.model_config().unwrap(), ModelConfig::variant_s());
    assert_eq!((rc.epochs, rc.train_config().optim.lr), (50, 1e-4));
    match RunConfig::load(&dir.path().join("missing.cfg")) {
        Err(Error::InvalidConfig(e)) => assert!(e[0].contains("missing.cfg")),
        other => panic!("{other:?}"),
    }
}
