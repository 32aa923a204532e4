mod common;
use mmkg_core::data::encode_matching;
use mmkg_core::training::{grad_check, GradCheckBatch, LossSelector};
use common::{tiny_config, tiny_corpus, tiny_model};

#[test]
fn probe_itm_per_param() {
    let corpus = tiny_corpus(4, 5);
    let model = tiny_model(tiny_config(), &corpus, 23);
    let mut triplets = Vec::new();
    for sample in corpus.train.iter().take(2) {
        triplets.extend(model.triplets_of(sample).unwrap());
    }
    let matching: Vec<_> = corpus.matching.iter().take(2)
        .map(|r| encode_matching(r, &model.vocab, model.config.encode_options()).unwrap())
        .collect();
    let b = GradCheckBatch { triplets, matching };
    for (sel, eps) in [(LossSelector::Itm, 3e-4), (LossSelector::Itm, 1e-3), (LossSelector::Gen, 3e-4), (LossSelector::Gen, 1e-3), (LossSelector::SumAll, 1e-3)] {
        let report = grad_check(&model, &b, sel, eps, 100000, 99).unwrap();
        println!("== {} eps={eps}", report.selector);
        let mut rows: Vec<_> = report.per_param.iter().collect();
        rows.sort_by(|a, b| b.max_rel_err.partial_cmp(&a.max_rel_err).unwrap());
        for r in rows.iter().take(3) {
            println!("  {:20} {:e} ({} checked)", r.name, r.max_rel_err, r.checked);
        }
    }
}
