"""Writes the 4-image IDX fixture byte by byte.

Images are 1 x 5 x 5, pixel (i, y, x) = (60*i + 11*y + 3*x) % 256.
Labels are 3, 1, 4, 1.
"""
import pathlib
import struct

OUT = pathlib.Path(__file__).parent / "idx"
N, H, W = 4, 5, 5
LABELS = [3, 1, 4, 1]


def main():
    OUT.mkdir(exist_ok=True)
    img = bytearray(struct.pack(">IIII", 0x00000803, N, H, W))
    for i in range(N):
        for y in range(H):
            for x in range(W):
                img.append((60 * i + 11 * y + 3 * x) % 256)
    (OUT / "four-images.idx3-ubyte").write_bytes(bytes(img))
    lab = bytearray(struct.pack(">II", 0x00000801, N))
    lab.extend(LABELS)
    (OUT / "four-labels.idx1-ubyte").write_bytes(bytes(lab))
    short = bytearray(struct.pack(">II", 0x00000801, N - 1))
    short.extend(LABELS[:-1])
    (OUT / "three-labels.idx1-ubyte").write_bytes(bytes(short))


if __name__ == "__main__":
    main()
