fn main() {
    std::process::exit(terrain_rnn::cli::run());
}
