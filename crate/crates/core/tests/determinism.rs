use secvit::rng::seeded;
use secvit::{ModelConfig, ParamSet, PlanStore, SecVit, Graph, Tensor};

/// Logits and every parameter gradient of one toy-model step.
fn step(threads: usize) -> Vec<Vec<f64>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut params = ParamSet::<f64>::new();
        let model = SecVit::new(&ModelConfig::toy(), &mut params, 5).unwrap();
        let x = Tensor::rand_uniform(&[4, 1, 32, 32], 0.0, 1.0, &mut seeded(6));
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let xv = g.constant(x);
        let out = model.forward(&mut g, &b, xv, &mut PlanStore::new()).unwrap();
        let logits = g.value(out.logits).data().to_vec();
        let loss = g.cross_entropy(out.logits, &[0, 1, 2, 3]).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let mut all = vec![logits];
        all.extend(b.grads(&mut grads).into_iter().map(|t| t.data().to_vec()));
        all
    })
}

#[test]
fn f64_results_do_not_depend_on_thread_count() {
    let one = step(1);
    assert_eq!(one, step(4));
    assert_eq!(one, step(3));
}
