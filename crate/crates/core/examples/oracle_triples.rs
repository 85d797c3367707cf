//! Renders a user-impersonation prompt and generates preference triples
//! with the embedding-similarity oracle.

use coldaug::numerics::{stream_id, RngStream};
use coldaug::oracle::{generate_triples, render_prompt, train_histories, PreferenceQuery, SimulatedOracle, SimulationMode};
use coldaug::synthetic::{SyntheticConfig, SyntheticDataset};

fn main() -> coldaug::Result<()> {
    let data = SyntheticDataset::generate(&SyntheticConfig { users: 100, ..SyntheticConfig::default() })?;
    let histories = train_histories(&data.split);
    let cold = data.cold_items();
    let (user, history) = histories.iter().next().expect("at least one warm user");
    let q = PreferenceQuery::new(user.clone(), history.clone(), cold[0].clone(), cold[1].clone())?;
    println!("{}\n", render_prompt(&q, &data.catalog, Some(10))?);

    let oracle = SimulatedOracle::new(&data.oracle_embeddings, SimulationMode::Deterministic)?;
    let mut rng = RngStream::new(0, stream_id("example/triples", 0, 0));
    let users = data.sample_users(10, &mut rng);
    let triples = generate_triples(&users, &cold, 3, &histories, &oracle, &mut rng)?;
    let agree = triples.iter().filter(|t| data.item_cluster[&t.pos] == data.user_cluster[&t.user]).count();
    println!("{} triples; positive in the user's genre: {agree}", triples.len());
    for t in triples.iter().take(5) {
        println!("  {} prefers {} over {}", t.user, t.pos, t.neg);
    }
    Ok(())
}
