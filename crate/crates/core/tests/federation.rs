use fedka::data::{generate_synthetic_domains, DomainDataset, SyntheticSpec};
use fedka::experiment::Domains;
use fedka::federation::{
    client_local_round, fedavg_aggregate, ClientState, ClientUpdate, DomainClassifierSlot, Federation, ProtocolConfig,
    ServerEndpoint, VariantFlags, VariantTag, VotingSize,
};
use fedka::metrics::{group_effect, RoundRecord};
use fedka::nn::{Model, ModelArch};
use fedka::seeds::{stream_rng, Stream};
use ndarray::Array2;

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        dim: 6,
        classes: 3,
        source_angles: vec![10.0, 40.0],
        target_angle: 70.0,
        rotation_planes: 6,
        samples_per_source: 160,
        target_train: 96,
        target_test: 60,
        ..SyntheticSpec::default()
    }
}

fn protocol() -> ProtocolConfig {
    ProtocolConfig {
        rounds: 3,
        batches_per_round: 4,
        batch_size: 8,
        mmd_group: 2,
        parallel_clients: false,
        ..ProtocolConfig::default()
    }
}

fn arch() -> ModelArch {
    ModelArch { input_dim: 6, encoder_hidden: 12, feature_dim: 5, classifier_hidden: 7, classes: 3 }
}

fn federation(tag: VariantTag, cfg: ProtocolConfig, sources: Option<Vec<DomainDataset>>) -> Federation {
    let d = Domains::from_datasets(generate_synthetic_domains(&spec(), 11).unwrap()).unwrap();
    Federation::new(
        arch(),
        VariantFlags::new(tag, VotingSize::Small),
        cfg,
        sources.unwrap_or(d.sources),
        d.target_train,
        d.target_test,
        5,
    )
    .unwrap()
}

fn run(tag: VariantTag, cfg: ProtocolConfig) -> (Vec<RoundRecord>, Model) {
    let mut f = federation(tag, cfg, None);
    let recs = (0..cfg.rounds).map(|_| f.run_round().unwrap()).collect();
    (recs, f.global)
}

#[test]
fn message_counts_follow_variant_gating() {
    let cfg = protocol();
    let k = 2;
    for tag in VariantTag::ALL {
        let (d, m, v) = tag.blocks();
        let (recs, _) = run(tag, cfg);
        for r in &recs {
            assert_eq!(r.dis_packets, if d { cfg.batches_per_round * k } else { 0 }, "{tag}");
            assert_eq!(r.mmd_packets, if m { cfg.batches_per_round / cfg.mmd_group * k } else { 0 }, "{tag}");
            assert_eq!(r.voted_samples > 0, v, "{tag}");
            assert_eq!(r.j_dis.is_some(), d);
            assert_eq!(r.j_mmd.is_some(), m);
            assert_eq!(r.j_finetune.is_some(), v);
        }
    }
}

#[test]
fn parallel_and_sequential_clients_agree() {
    let seq = run(VariantTag::FedKA, protocol());
    let par = run(VariantTag::FedKA, ProtocolConfig { parallel_clients: true, ..protocol() });
    assert_eq!(seq.0, par.0);
    assert_eq!(seq.1, par.1);
}

#[test]
fn rounds_are_deterministic() {
    let a = run(VariantTag::DisVoting, protocol());
    let b = run(VariantTag::DisVoting, protocol());
    assert_eq!(a.1.fingerprint(), b.1.fingerprint());
    assert_eq!(a.0, b.0);
}

#[test]
fn variants_share_the_initial_model() {
    let hashes: Vec<String> =
        VariantTag::ALL.iter().map(|&t| federation(t, protocol(), None).global.fingerprint()).collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn fedavg_variant_is_plain_averaging() {
    // rebuild the FedAvg round by hand from the public pieces
    let cfg = protocol();
    let mut f = federation(VariantTag::FedAvg, cfg, None);
    let g0 = f.global.clone();
    let flags = f.flags;
    let mut updates = Vec::new();
    let d = Domains::from_datasets(generate_synthetic_domains(&spec(), 11).unwrap()).unwrap();
    for (k, src) in d.sources.into_iter().enumerate() {
        let mut client = ClientState::new(k, src, stream_rng(5, Stream::Client, k as u64)).unwrap();
        let mut slot = DomainClassifierSlot::new(&arch(), 0).unwrap();
        let tf = Array2::zeros((0, 5));
        let mut ep = ServerEndpoint { slot: &mut slot, target_features: tf.view(), flags, lr: cfg.lr, batch_size: 8, mmd_group: 2 };
        updates.push(client_local_round(&mut client, &g0, &mut ep, &flags, &cfg, 0).unwrap().update);
    }
    let expected = fedavg_aggregate(&g0, &updates).unwrap();
    f.run_round().unwrap();
    assert_eq!(f.global, expected);
}

#[test]
fn identical_clients_have_zero_group_effect() {
    let d = Domains::from_datasets(generate_synthetic_domains(&spec(), 11).unwrap()).unwrap();
    let same = vec![d.sources[0].clone(), d.sources[0].clone(), d.sources[0].clone()];
    // identical data is not enough: streams differ per client, so compare updates directly
    let g = Model::init(&arch(), 1, 2).unwrap();
    let flags = VariantFlags::new(VariantTag::FedAvg, VotingSize::Small);
    let cfg = protocol();
    let updates: Vec<ClientUpdate> = same
        .into_iter()
        .enumerate()
        .map(|(k, src)| {
            let mut c = ClientState::new(k, src, stream_rng(9, Stream::Client, 0)).unwrap();
            let mut slot = DomainClassifierSlot::new(&arch(), 0).unwrap();
            let tf = Array2::zeros((0, 5));
            let mut ep = ServerEndpoint { slot: &mut slot, target_features: tf.view(), flags, lr: cfg.lr, batch_size: 8, mmd_group: 2 };
            client_local_round(&mut c, &g, &mut ep, &flags, &cfg, 0).unwrap().update
        })
        .collect();
    assert_eq!(updates[0].delta, updates[1].delta);
    let agg = fedavg_aggregate(&g, &updates).unwrap();
    let ge = group_effect(&g, &updates, &agg, &d.target_test).unwrap();
    assert_eq!(ge.value, 0.0);
}

#[test]
fn single_client_group_effect_is_zero() {
    let d = Domains::from_datasets(generate_synthetic_domains(&spec(), 11).unwrap()).unwrap();
    let mut f = federation(VariantTag::FedAvg, protocol(), Some(vec![d.sources[1].clone()]));
    for _ in 0..3 {
        assert_eq!(f.run_round().unwrap().ge, Some(0.0));
    }
}

#[test]
fn records_are_self_consistent() {
    let (recs, _) = run(VariantTag::FedKA, protocol());
    for (t, r) in recs.iter().enumerate() {
        assert_eq!(r.round, t);
        let mean = r.tta_patched.iter().sum::<f64>() / r.tta_patched.len() as f64;
        assert!((mean - r.tta_aggregated - r.ge.unwrap()).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(&r.tta_global));
        assert!(r.lambda_p > 0.0 && r.lambda_p < 1.0);
    }
    assert!(recs.windows(2).all(|w| w[1].lambda_p > w[0].lambda_p));
}
