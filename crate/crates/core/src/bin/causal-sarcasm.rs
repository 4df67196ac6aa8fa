fn main() -> anyhow::Result<()> {
    causal_sarcasm::cli::run()
}
