"""Decoder-side exporter, run as a child process by the codec orchestrator.

    python -m mbmdetect.mvexport VIDEO [--mv OUT.csv] [--mb-debug OUT.txt]

One single-threaded decode pass writes either or both channels:

* ``--mv``: one CSV record per exported block vector, frames numbered in the
  decoder's output order;
* ``--mb-debug``: the decoder's ``mb_type`` debug matrices, one log message
  per line, without any log prefix.

The debug text is taken from the decoder's log callback message by message.
Scraping it from the ffmpeg CLI's stderr is unreliable because other
pipeline threads can interleave partial lines with the decoder's rows.
"""
import argparse
import csv
import sys

from .extract import MV_EXACT_COLUMNS, is_debug_line


def export(video, mv_out=None, mb_out=None):
    import av
    import av.logging

    flags = {}
    if mv_out:
        flags["flags2"] = "+export_mvs"
    if mb_out:
        flags["debug"] = "mb_type"
    lavc = ".".join(map(str, av.library_versions["libavcodec"]))
    mv_fh = open(mv_out, "w", newline="") if mv_out else None
    try:
        with av.open(str(video)) as container:
            stream = container.streams.video[0]
            stream.thread_type = "NONE"
            stream.codec_context.thread_count = 1
            stream.codec_context.options = flags
            writer = None
            if mv_fh:
                mv_fh.write(f"# mbmdetect motion vectors, libavcodec {lavc}\n")
                writer = csv.writer(mv_fh, lineterminator="\n")
                writer.writerow(MV_EXACT_COLUMNS)
            if mb_out:
                av.logging.set_skip_repeated(False)
                av.logging.set_level(av.logging.DEBUG)
            with av.logging.Capture(local=False) as logs:
                for index, frame in enumerate(container.decode(stream)):
                    if writer is None:
                        continue
                    side = frame.side_data.get("MOTION_VECTORS")
                    if side is None:
                        continue
                    for v in side.to_ndarray():
                        writer.writerow([index, v["source"], v["w"], v["h"], v["src_x"], v["src_y"],
                                         v["dst_x"], v["dst_y"], v["motion_x"], v["motion_y"],
                                         v["motion_scale"]])
    finally:
        if mv_fh:
            mv_fh.close()
    if mb_out:
        lines = []
        for _level, name, message in logs:
            for line in message.splitlines():
                if name == "h264" and is_debug_line(line):
                    lines.append(line)
        with open(mb_out, "w") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="python -m mbmdetect.mvexport")
    parser.add_argument("video")
    parser.add_argument("--mv", help="motion-vector CSV output")
    parser.add_argument("--mb-debug", help="macroblock-type debug text output")
    args = parser.parse_args(argv)
    if not (args.mv or args.mb_debug):
        parser.error("nothing to export; give --mv and/or --mb-debug")
    try:
        export(args.video, args.mv, args.mb_debug)
    except Exception as exc:  # reported through the exit code to the parent
        print(f"mvexport: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
