"""Rotated IoU, the IoU gate and rotated NMS on a few hand-made boxes."""
import math

from dgobb.geometry import OrientedBox, gate_sigma, rotated_iou, rotated_nms


def main():
    a = OrientedBox(32, 32, 20, 8, 0.0)
    for deg in (0, 15, 30, 45, 90):
        b = OrientedBox(32, 32, 20, 8, math.radians(deg))
        print(f"rotated by {deg:2d} deg: IoU {rotated_iou(a, b):.4f}  gate {gate_sigma(b, [a])}")

    boxes = [OrientedBox(20, 20, 16, 6, 0.1), OrientedBox(21, 20, 16, 6, 0.15), OrientedBox(44, 40, 12, 5, -0.7)]
    keep = rotated_nms(boxes, [0.9, 0.8, 0.7], 0.5)
    print("NMS keeps", keep)


if __name__ == "__main__":
    main()
