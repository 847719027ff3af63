// Teacher-forced diagnostic: with the gold prefix, how well does the
// memory decoder predict new-word tokens under full memory?
use memdecoder::baseline::Baseline;
use memdecoder::config::RunConfig;
use memdecoder::data::Split;
use memdecoder::eval::phrase_token_positions;
use memdecoder::graph::Graph;
use memdecoder::memory::{MemoryEntry, MemoryModel};
use memdecoder::params::ParamStore;
use memdecoder::tokenizer::BpeVocab;
use memdecoder::tokenizer::{BOS, EOS};

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::load(std::path::Path::new("/tmp/desk.json"))?;
    let vocab = BpeVocab::load(std::path::Path::new("/tmp/desk/vocab.json"))?;
    let split = Split::open(std::path::Path::new("/tmp/desk/data"), "new_words")?;
    let (mut store, _) = ParamStore::<f32>::load(std::path::Path::new("/tmp/desk/ckpt_2mem_b"))?;
    let base = Baseline::bind(&mut store, &cfg.baseline);
    let model = MemoryModel::bind(&mut store, &base, &cfg.memory);

    let entries: Vec<MemoryEntry> = split
        .manifest
        .new_words
        .iter()
        .map(|w| MemoryEntry::new(w, &vocab))
        .collect::<Result<_, _>>()?;
    let snap = model.snapshot_memory(&store, &entries)?;

    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut nw_tot = 0usize;
    let mut nw_mem_ok = 0usize;
    let mut nw_final_ok = 0usize;
    let mut other_tot = 0usize;
    let mut other_final_ok = 0usize;
    for rec in split.manifest.utterances.iter().take(40) {
        let word = rec.new_word.clone().unwrap();
        let entry_idx = entries.iter().position(|e| e.text == word).unwrap() + 1;
        let mut target = vocab.encode(&rec.transcript);
        target.push(EOS);
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(&target[..target.len() - 1]);
        let feats = split.features(rec)?;

        let mut g = Graph::new(&store);
        let enc = base.encode(&mut g, &feats, &mut rng);
        let mem = snap.import(&mut g);
        let p_base = base.decode_probs(&mut g, &prefix, enc, &mut rng);
        let (p_mem, scores, gates) = model.decoder_forward(&mut g, &base, &prefix, enc, &mem, &mut rng);
        let (p_final, gate) = model.combine_outputs(&mut g, p_base, p_mem, gates);
        let v = vocab.size();
        let pm = g.values(p_mem).to_vec();
        let pf = g.values(p_final).to_vec();
        let gv = g.values(gate).to_vec();
        let am: Vec<Vec<usize>> = scores.iter().map(|&s| g.argmax_rows(s)).collect();
        let positions = phrase_token_positions(&target, &word, &vocab);
        let posset: std::collections::HashSet<usize> = positions.iter().copied().collect();
        for (t, &y) in target.iter().enumerate() {
            let arg_final = (0..v).max_by(|&a, &b| pf[t * v + a].partial_cmp(&pf[t * v + b]).unwrap()).unwrap();
            if posset.contains(&t) {
                let arg_mem = (0..v).max_by(|&a, &b| pm[t * v + a].partial_cmp(&pm[t * v + b]).unwrap()).unwrap();
                nw_tot += 1;
                nw_mem_ok += (arg_mem == y) as usize;
                nw_final_ok += (arg_final == y) as usize;
                if nw_tot <= 25 {
                    let mut top: Vec<usize> = (0..v).collect();
                    top.sort_by(|&a, &b| pm[t * v + b].partial_cmp(&pm[t * v + a]).unwrap());
                    let top3: Vec<String> = top[..3]
                        .iter()
                        .map(|&i| format!("{}:{:.2}", vocab.token(i).unwrap_or("?"), pm[t * v + i]))
                        .collect();
                    println!(
                        "word {word:<10} t={t:<3} y={:<8} p_mem[y]={:.3} top3={:<30} gate={:.2} sel={:?} (want {entry_idx})",
                        vocab.token(y).unwrap_or("?"),
                        pm[t * v + y],
                        top3.join(" "),
                        gv[t],
                        am.iter().map(|blk| blk[t]).collect::<Vec<_>>(),
                    );
                }
                let _ = arg_mem;
            } else {
                other_tot += 1;
                other_final_ok += (arg_final == y) as usize;
            }
        }
    }
    println!(
        "new-word positions: {nw_tot}, p_mem argmax correct {:.1}%, p_final correct {:.1}%",
        100.0 * nw_mem_ok as f64 / nw_tot as f64,
        100.0 * nw_final_ok as f64 / nw_tot as f64
    );
    println!(
        "other positions: {other_tot}, p_final correct {:.1}%",
        100.0 * other_final_ok as f64 / other_tot as f64
    );
    Ok(())
}
