fn main() {
    // Placeholder until the CLI module lands.
    eprintln!("protomil: not yet wired");
    std::process::exit(1);
}
