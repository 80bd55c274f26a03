"""
Convert an ASVspoof 2019 ASV protocol file into the back-end trials TSV.

Input lines look like
    LA_0039 LA_E_2834763 A11 spoof
    LA_0039 LA_E_1103494 bonafide target
i.e. model id, test utterance, source (attack id or "bonafide") and key, with
any extra columns in between ignored. Output rows are
    model_id <TAB> test_utt <TAB> target|nontarget|spoof <TAB> attack_id|-

Usage:
    python Useful_tools/asvspoof_protocol_to_trials.py PROTOCOL.txt [TRIALS.tsv]
"""
import csv
import logging
import os
import sys

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s %(levelname)s %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger(__name__)

KEYS = ("target", "nontarget", "spoof")


def parse_protocol_line(line):
    """Return (model_id, test_utt, key, attack_id) or None for an unusable line."""
    fields = line.split()
    if len(fields) < 4:
        return None
    model_id, test_utt, source, key = fields[0], fields[1], fields[-2], fields[-1]
    if key not in KEYS:
        return None
    if key == "spoof":
        if source == "bonafide":
            return None
        return model_id, test_utt, key, source
    if source != "bonafide":
        return None
    return model_id, test_utt, key, "-"


def convert_protocol_to_trials(input_file_path, output_file_path=None):
    """Convert one protocol file; returns the per-key counts or None on failure."""
    if not os.path.exists(input_file_path):
        logger.error(f"File not found: {input_file_path}")
        return None
    if output_file_path is None:
        output_file_path = f"{os.path.splitext(input_file_path)[0]}_trials.tsv"

    counts = {key: 0 for key in KEYS}
    seen = set()
    line_count = 0
    try:
        with open(input_file_path, "r", encoding="utf-8") as infile, \
                open(output_file_path, "w", newline="", encoding="utf-8") as outfile:
            writer = csv.writer(outfile, delimiter="\t", lineterminator="\n")
            for line in infile:
                line_count += 1
                if not line.strip():
                    continue
                row = parse_protocol_line(line)
                if row is None:
                    logger.warning(f"Could not parse line {line_count}: {line.strip()}")
                    continue
                if row[:2] in seen:
                    logger.warning(f"Skipping duplicate trial on line {line_count}: {row[0]} {row[1]}")
                    continue
                seen.add(row[:2])
                writer.writerow(row)
                counts[row[2]] += 1
    except UnicodeDecodeError as e:
        logger.error(f"'{input_file_path}' is not valid UTF-8 after line {line_count}: {e.reason}")
        os.remove(output_file_path)
        return None

    logger.info(f"✓ Converted '{input_file_path}' -> '{output_file_path}'")
    logger.info(f"  Trials written: {sum(counts.values())}/{line_count} lines {counts}")
    return counts


def main():
    if len(sys.argv) < 2:
        logger.error("Usage: asvspoof_protocol_to_trials.py PROTOCOL.txt [TRIALS.tsv]")
        sys.exit(1)
    input_file = sys.argv[1].strip("\"'")
    output_file = sys.argv[2].strip("\"'") if len(sys.argv) > 2 else None
    counts = convert_protocol_to_trials(input_file, output_file)
    if counts is None:
        sys.exit(2)
    logger.info("✅ Protocol conversion completed successfully")


if __name__ == "__main__":
    main()
