use idgl_core::data_io::{load_named_dataset, resolve_data_dir};
use idgl_core::trainer::{
    accuracy, adam_step, lift_params, paper_hyperparams, AdamState, forward_idgl, IdglParams,
    Mode, RunContext, Variant,
};
use idgl_core::autodiff::Tape;
use idgl_core::linalg::Dense;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn masked_ce(logits: &Dense, y: &[usize], idx: &[usize]) -> f64 {
    let mut loss = 0.0;
    for &i in idx {
        let row = logits.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
        loss += z.ln() + mx - row[y[i]];
    }
    loss / idx.len() as f64
}

fn main() {
    let dataset: String = std::env::args().nth(1).unwrap();
    let seed: u64 = std::env::args().nth(2).unwrap().parse().unwrap();
    let epochs: usize = std::env::args().nth(3).unwrap().parse().unwrap();
    let dir = resolve_data_dir(None);
    let mut hp = paper_hyperparams(&dataset, Variant::Idgl).unwrap();
    hp.seed = seed;
    let ds = load_named_dataset(&dataset, &dir, seed).unwrap();
    let ctx = RunContext::build(&ds, &hp, Variant::Idgl).unwrap();
    let mut params = IdglParams::init(ds.dim(), hp.hidden, ds.n_classes, hp.m, hp.seed).unwrap();
    let shapes = vec![
        params.heads_feat.shape(),
        params.heads_emb.shape(),
        params.gcn.w1.shape(),
        params.gcn.w2.shape(),
    ];
    let mut adam = AdamState::new(&shapes);
    let mut dropout_rng = stream_rng(hp.seed, 2);

    for epoch in 1..=epochs {
        let grads;
        {
            let mut tape = Tape::new();
            let vars = lift_params(&mut tape, &params).unwrap();
            let (loss, _) =
                forward_idgl(&mut tape, &vars, &ds, &ctx, &hp, Mode::Train, &mut dropout_rng)
                    .unwrap();
            tape.backward(loss).unwrap();
            grads = [vars.heads_feat.w, vars.heads_emb.w, vars.w1, vars.w2]
                .iter()
                .zip(&shapes)
                .map(|(&v, &(r, c))| tape.grad(v).cloned().unwrap_or_else(|| Dense::zeros(r, c)))
                .collect::<Vec<_>>();
        }
        {
            let IdglParams { heads_feat, heads_emb, gcn } = &mut params;
            let mut refs = [heads_feat, heads_emb, &mut gcn.w1, &mut gcn.w2];
            adam_step(&mut refs, &grads, &mut adam, hp.lr, hp.weight_decay).unwrap();
        }
        let mut tape = Tape::new();
        let vars = lift_params(&mut tape, &params).unwrap();
        let mut rng = stream_rng(hp.seed, 2);
        let (_, trace) =
            forward_idgl(&mut tape, &vars, &ds, &ctx, &hp, Mode::Eval, &mut rng).unwrap();
        let dev = accuracy(&trace.predictions, &ds.y, &ds.dev_idx).unwrap();
        let test = accuracy(&trace.predictions, &ds.y, &ds.test_idx).unwrap();
        let devce = masked_ce(&trace.predictions, &ds.y, &ds.dev_idx);
        if epoch % 10 == 0 || dev >= 0.999 || epoch <= 12 {
            println!("epoch={epoch} dev={dev:.3} devce={devce:.4} test={test:.4}");
        }
        if epoch == 1 || epoch == 50 || epoch == 200 {
            density_report(&ds, &ctx, &hp, &params, epoch);
        }
    }
}

fn density_report(
    ds: &idgl_core::data_io::GraphDataset,
    ctx: &RunContext,
    hp: &idgl_core::trainer::HyperParams,
    params: &IdglParams,
    epoch: usize,
) {
    use idgl_core::graph_learner::{combine_graphs, learn_graph, MetricHeads, Strictness};
    let mut tape = Tape::new();
    let vars = lift_params(&mut tape, params).unwrap();
    let mut rng = stream_rng(hp.seed, 2);
    let (_, _trace) =
        forward_idgl(&mut tape, &vars, &ds, &ctx, &hp, Mode::Eval, &mut rng).unwrap();
    // feature-level graph density
    let mut t2 = Tape::new();
    let x = t2.leaf(ds.x.clone(), false);
    let hf = MetricHeads::new(&mut t2, params.heads_feat.clone()).unwrap();
    let g1 = learn_graph(&mut t2, x, &hf, hp.eps, Strictness::Guarded).unwrap();
    let sp = g1.a;
    let a1 = t2.value(sp).clone();
    let n = a1.rows();
    let nnz1 = a1.as_slice().iter().filter(|&&v| v != 0.0).count();

    // embedding-level graph density after one GCN layer
    let l0c = t2.register_csr(ctx.l0.clone());
    let adj1 = combine_graphs(&mut t2, l0c, sp, sp, hp.lambda_, hp.eta).unwrap();
    let w1v = t2.leaf(params.gcn.w1.clone(), false);
    let h = t2.matmul(adj1, x).unwrap();
    let h = t2.matmul(h, w1v).unwrap();
    let z = t2.relu(h).unwrap();
    let he = MetricHeads::new(&mut t2, params.heads_emb.clone()).unwrap();
    let g2 = learn_graph(&mut t2, z, &he, hp.eps, Strictness::Guarded).unwrap();
    let sp2 = g2.a;
    let a2 = t2.value(sp2);
    let nnz2 = a2.as_slice().iter().filter(|&&v| v != 0.0).count();
    println!(
        "  epoch={epoch} A1 density={:.4} A2 density={:.4} (n*n={})",
        nnz1 as f64 / (n * n) as f64,
        nnz2 as f64 / (n * n) as f64,
        n * n
    );
}
